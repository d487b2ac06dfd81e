//! Finite-state machine that interleaves fine-tuning, validation and global BA triggers,
//! plus the single-slot scheduler that runs BA off the controller thread.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Validation period in keyframes.
    pub m: u64,
    /// Consecutive passing validations needed before BA.
    pub n: u64,
    pub tau_val: f64,
    /// Skip fine-tuning while the last `n` validations passed.
    pub halt_after_converged: bool,
    /// Fire BA at every `n`-th consecutive pass instead of only the first.
    pub ba_repeat: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            m: 5,
            n: 3,
            tau_val: 0.2,
            halt_after_converged: false,
            ba_repeat: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(Error::Config("controller m and n must be at least 1".into()));
        }
        if !(self.tau_val > 0.0) {
            return Err(Error::Config("tau_val must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsmState {
    Idle,
    FineTune,
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FsmState::Idle => "IDLE",
            FsmState::FineTune => "FINE_TUNE",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub state: FsmState,
    pub t: u64,
    pub n_converged: u64,
    pub run_global_ba: bool,
    pub ba_fired: u64,
}

impl Default for ControllerState {
    fn default() -> Self {
        Self {
            state: FsmState::Idle,
            t: 0,
            n_converged: 0,
            run_global_ba: false,
            ba_fired: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    Validate(f64),
    FineTune,
    /// Fine-tune suppressed because the model is considered converged.
    Hold,
    TriggerBa,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Validate(_) => f.write_str("validate"),
            Action::FineTune => f.write_str("fine_tune"),
            Action::Hold => f.write_str("hold"),
            Action::TriggerBa => f.write_str("trigger_ba"),
        }
    }
}

/// Side effects driven by the controller.
pub trait Hooks {
    fn validate(&mut self) -> Result<f64>;
    fn fine_tune(&mut self) -> Result<()>;
    fn trigger_ba(&mut self) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub timestamp: f64,
    pub t: u64,
    pub state: FsmState,
    pub l_val: Option<f64>,
    pub n_converged: u64,
    pub action: Action,
}

#[derive(Clone, Debug, Default)]
pub struct Controller {
    pub config: ControllerConfig,
    pub state: ControllerState,
    pub events: Vec<Event>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: ControllerState::default(),
            events: Vec::new(),
        })
    }

    /// Processes one keyframe. On hook failure the state and event log are restored.
    pub fn step<H: Hooks + ?Sized>(&mut self, hooks: &mut H, timestamp: f64) -> Result<Vec<Action>> {
        let saved = self.state.clone();
        let n_events = self.events.len();
        match self.step_inner(hooks, timestamp) {
            Ok(a) => Ok(a),
            Err(e) => {
                self.state = saved;
                self.events.truncate(n_events);
                Err(e)
            }
        }
    }

    fn step_inner<H: Hooks + ?Sized>(&mut self, hooks: &mut H, timestamp: f64) -> Result<Vec<Action>> {
        let cfg = self.config.clone();
        let mut actions = Vec::new();
        let s = &mut self.state;
        s.run_global_ba = false;
        let mut l_val = None;
        if s.t > 0 && s.t % cfg.m == 0 {
            let l = hooks.validate()?;
            l_val = Some(l);
            if l < cfg.tau_val {
                s.n_converged += 1;
            } else {
                s.n_converged = 0;
            }
            if s.n_converged > 0 && s.n_converged % cfg.n == 0 && (cfg.ba_repeat || s.ba_fired == 0) {
                s.run_global_ba = true;
            }
            actions.push(Action::Validate(l));
        } else {
            s.state = FsmState::FineTune;
            if cfg.halt_after_converged && s.n_converged >= cfg.n {
                actions.push(Action::Hold);
            } else {
                hooks.fine_tune()?;
                actions.push(Action::FineTune);
            }
        }
        let state_at_action = self.state.state;
        self.state.state = FsmState::Idle;
        if self.state.run_global_ba {
            hooks.trigger_ba()?;
            self.state.ba_fired += 1;
            actions.push(Action::TriggerBa);
        }
        for a in &actions {
            self.events.push(Event {
                timestamp,
                t: self.state.t,
                state: if matches!(a, Action::FineTune | Action::Hold) {
                    state_at_action
                } else {
                    FsmState::Idle
                },
                l_val,
                n_converged: self.state.n_converged,
                action: *a,
            });
        }
        self.state.t += 1;
        Ok(actions)
    }

    pub fn write_event_log<W: Write>(&self, w: W) -> Result<()> {
        write_events(&self.events, w)
    }
}

/// CSV with columns `timestamp,t,state,l_val,n_converged,action`.
pub fn write_events<W: Write>(events: &[Event], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["timestamp", "t", "state", "l_val", "n_converged", "action"])?;
    for e in events {
        out.write_record([
            format!("{:.6}", e.timestamp),
            e.t.to_string(),
            e.state.to_string(),
            e.l_val.map(|v| format!("{v:.9}")).unwrap_or_default(),
            e.n_converged.to_string(),
            e.action.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Submit {
    /// The worker was idle and picked the job up.
    Started,
    /// A run is active; the job waits for it.
    Queued,
    /// A run is active and a job was already waiting; the new one replaced it.
    Coalesced,
}

struct Slot<J, R> {
    pending: Option<J>,
    running: bool,
    shutdown: bool,
    done: Vec<R>,
    coalesced: u64,
}

type Shared<J, R> = Arc<(Mutex<Slot<J, R>>, Condvar)>;

/// Runs jobs one at a time on a worker thread, keeping at most one job waiting.
pub struct BaScheduler<J: Send + 'static, R: Send + 'static> {
    shared: Shared<J, R>,
    handle: Option<JoinHandle<()>>,
}

impl<J: Send + 'static, R: Send + 'static> BaScheduler<J, R> {
    pub fn new<F>(mut work: F) -> Self
    where
        F: FnMut(J) -> R + Send + 'static,
    {
        let shared: Shared<J, R> = Arc::new((
            Mutex::new(Slot {
                pending: None,
                running: false,
                shutdown: false,
                done: Vec::new(),
                coalesced: 0,
            }),
            Condvar::new(),
        ));
        let inner = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("ba-worker".into())
            .spawn(move || {
                let (lock, cv) = &*inner;
                loop {
                    let job = {
                        let mut s = lock.lock().expect("scheduler lock");
                        while s.pending.is_none() && !s.shutdown {
                            s = cv.wait(s).expect("scheduler lock");
                        }
                        match s.pending.take() {
                            Some(j) => {
                                s.running = true;
                                j
                            }
                            None => return,
                        }
                    };
                    let r = work(job);
                    let mut s = lock.lock().expect("scheduler lock");
                    s.running = false;
                    s.done.push(r);
                    cv.notify_all();
                }
            })
            .expect("spawn BA worker");
        Self {
            shared,
            handle: Some(handle),
        }
    }

    pub fn submit(&self, job: J) -> Submit {
        let (lock, cv) = &*self.shared;
        let mut s = lock.lock().expect("scheduler lock");
        let outcome = if !s.running && s.pending.is_none() {
            Submit::Started
        } else if s.pending.is_none() {
            Submit::Queued
        } else {
            s.coalesced += 1;
            log::info!("BA already running; trigger coalesced");
            Submit::Coalesced
        };
        s.pending = Some(job);
        cv.notify_all();
        outcome
    }

    pub fn is_busy(&self) -> bool {
        let s = self.shared.0.lock().expect("scheduler lock");
        s.running || s.pending.is_some()
    }

    pub fn coalesced(&self) -> u64 {
        self.shared.0.lock().expect("scheduler lock").coalesced
    }

    /// Finished results in completion order, without waiting.
    pub fn take_results(&self) -> Vec<R> {
        std::mem::take(&mut self.shared.0.lock().expect("scheduler lock").done)
    }

    /// Blocks until nothing is running or waiting, then returns finished results.
    pub fn wait_idle(&self) -> Vec<R> {
        let (lock, cv) = &*self.shared;
        let mut s = lock.lock().expect("scheduler lock");
        while s.running || s.pending.is_some() {
            s = cv.wait(s).expect("scheduler lock");
        }
        std::mem::take(&mut s.done)
    }
}

impl<J: Send + 'static, R: Send + 'static> Drop for BaScheduler<J, R> {
    fn drop(&mut self) {
        {
            let (lock, cv) = &*self.shared;
            if let Ok(mut s) = lock.lock() {
                s.shutdown = true;
                s.pending = None;
            }
            cv.notify_all();
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;

    struct Scripted {
        losses: Vec<f64>,
        next: usize,
        fail_fine_tune: bool,
        calls: Vec<&'static str>,
    }

    impl Scripted {
        fn new(losses: Vec<f64>) -> Self {
            Self {
                losses,
                next: 0,
                fail_fine_tune: false,
                calls: Vec::new(),
            }
        }
    }

    impl Hooks for Scripted {
        fn validate(&mut self) -> Result<f64> {
            self.calls.push("validate");
            let l = self.losses[self.next % self.losses.len()];
            self.next += 1;
            Ok(l)
        }
        fn fine_tune(&mut self) -> Result<()> {
            if self.fail_fine_tune {
                return Err(Error::Hook("fine-tune failed".into()));
            }
            self.calls.push("fine_tune");
            Ok(())
        }
        fn trigger_ba(&mut self) -> Result<()> {
            self.calls.push("trigger_ba");
            Ok(())
        }
    }

    fn ba_times(c: &Controller) -> Vec<u64> {
        c.events
            .iter()
            .filter(|e| e.action == Action::TriggerBa)
            .map(|e| e.t)
            .collect()
    }

    #[test]
    fn all_pass_fires_at_multiples_of_mn() {
        let mut c = Controller::new(ControllerConfig::default()).unwrap();
        let mut h = Scripted::new(vec![0.1]);
        for t in 0..31 {
            c.step(&mut h, t as f64).unwrap();
        }
        assert_eq!(ba_times(&c), vec![15, 30]);
    }

    #[test]
    fn failed_validation_resets_patience() {
        let mut c = Controller::new(ControllerConfig::default()).unwrap();
        let mut h = Scripted::new(vec![0.1, 0.5, 0.1, 0.1, 0.1]);
        for t in 0..26 {
            c.step(&mut h, t as f64).unwrap();
        }
        assert_eq!(ba_times(&c), vec![25]);
    }

    #[test]
    fn non_validation_step_fine_tunes_once() {
        let mut c = Controller::new(ControllerConfig::default()).unwrap();
        let mut h = Scripted::new(vec![0.1]);
        let a = c.step(&mut h, 0.0).unwrap();
        assert_eq!(a, vec![Action::FineTune]);
        assert_eq!(h.calls, vec!["fine_tune"]);
    }

    #[test]
    fn hook_failure_rolls_back() {
        let mut c = Controller::new(ControllerConfig::default()).unwrap();
        let mut h = Scripted::new(vec![0.1]);
        c.step(&mut h, 0.0).unwrap();
        let before = c.state.clone();
        h.fail_fine_tune = true;
        assert!(c.step(&mut h, 1.0).is_err());
        assert_eq!(c.state, before);
        assert_eq!(c.events.len(), 1);
    }

    #[test]
    fn single_trigger_and_halt_flags() {
        let cfg = ControllerConfig {
            ba_repeat: false,
            halt_after_converged: true,
            ..ControllerConfig::default()
        };
        let mut c = Controller::new(cfg).unwrap();
        let mut h = Scripted::new(vec![0.1]);
        for t in 0..40 {
            c.step(&mut h, t as f64).unwrap();
        }
        assert_eq!(ba_times(&c), vec![15]);
        assert!(c.events.iter().any(|e| e.action == Action::Hold && e.t == 16));
        assert!(!c.events.iter().any(|e| e.action == Action::FineTune && e.t > 15));
    }

    #[test]
    fn event_log_has_header_and_rows() {
        let mut c = Controller::new(ControllerConfig::default()).unwrap();
        let mut h = Scripted::new(vec![0.1]);
        for t in 0..6 {
            c.step(&mut h, t as f64 * 0.5).unwrap();
        }
        let mut buf = Vec::new();
        c.write_event_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "timestamp,t,state,l_val,n_converged,action");
        assert_eq!(lines.len(), 7);
        assert!(lines[6].starts_with("2.500000,5,IDLE,0.1"));
    }

    #[test]
    fn scheduler_coalesces_while_busy() {
        let (gate_tx, gate_rx) = mpsc::channel::<()>();
        let gate = Mutex::new(gate_rx);
        let sched = BaScheduler::new(move |j: u32| {
            gate.lock().unwrap().recv().unwrap();
            j
        });
        assert_eq!(sched.submit(1), Submit::Started);
        // Wait until the worker has taken the first job.
        while sched.shared.0.lock().unwrap().pending.is_some() {
            std::thread::yield_now();
        }
        assert_eq!(sched.submit(2), Submit::Queued);
        assert_eq!(sched.submit(3), Submit::Coalesced);
        gate_tx.send(()).unwrap();
        gate_tx.send(()).unwrap();
        assert_eq!(sched.wait_idle(), vec![1, 3]);
        assert_eq!(sched.coalesced(), 1);
        assert!(!sched.is_busy());
    }
}
