//! Keyframes, map points, the shared store and the two publish/subscribe channels.
//!
//! Records on the wire are little-endian and length-prefixed: a `u32` byte count
//! followed by a body that starts with a four-byte magic tag.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::depth_net::{read_f32s, read_f64, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};

pub const KEYFRAME_MAGIC: &[u8; 4] = b"KFA1";
pub const GRAPH_MAGIC: &[u8; 4] = b"KGA1";
pub const HEADER_MAGIC: &[u8; 4] = b"KLOG";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsePoint {
    pub u: f32,
    pub v: f32,
    /// Depth in meters along the optical axis.
    pub depth: f32,
    pub map_point_id: u64,
}

impl SparsePoint {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u as f64, self.v as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub timestamp: f64,
    /// Grayscale `[H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// World from camera.
    pub pose: PoseSE3,
    pub sparse_points: Vec<SparsePoint>,
    /// Evaluation only.
    pub gt_depth: Option<Tensor<f32>>,
    /// Evaluation only; world from camera.
    pub gt_pose: Option<PoseSE3>,
    pub last_val_loss: Option<f64>,
}

impl Keyframe {
    pub fn size(&self) -> (usize, usize) {
        self.image.hw()
    }

    pub fn camera_from_world(&self) -> PoseSE3 {
        self.pose.inverse()
    }

    /// Pose of this keyframe's camera relative to `other`: maps points from this
    /// camera frame into `other`'s camera frame.
    pub fn to_frame_of(&self, other: &Keyframe) -> PoseSE3 {
        other.pose.inverse().compose(&self.pose)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image.hw();
        if self.image.shape().len() != 2 || h == 0 || w == 0 {
            return Err(Error::Record(format!(
                "keyframe {} image must be a non-empty HxW tensor",
                self.id
            )));
        }
        if let Some(gt) = &self.gt_depth {
            if gt.shape() != self.image.shape() {
                return Err(Error::Record(format!(
                    "keyframe {} depth shape {:?} differs from image",
                    self.id,
                    gt.shape()
                )));
            }
        }
        if let Some(p) = self.sparse_points.iter().find(|p| !(p.depth > 0.0)) {
            return Err(Error::Record(format!(
                "keyframe {} has non-positive sparse depth {}",
                self.id, p.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub observations: Vec<(u64, Vector2<f64>)>,
    pub host_kf: Option<u64>,
    pub culled: bool,
}

impl MapPoint {
    pub fn observed_in(&self, kf: u64) -> Option<Vector2<f64>> {
        self.observations
            .iter()
            .find(|(id, _)| *id == kf)
            .map(|(_, p)| *p)
    }
}

/// Immutable snapshot of poses and surviving map points.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeGraph {
    pub seq: u64,
    pub poses: Vec<(u64, PoseSE3)>,
    pub points: Vec<(u64, Vector3<f64>)>,
}

impl KeyframeGraph {
    pub fn pose(&self, id: u64) -> Option<&PoseSE3> {
        self.poses.iter().find(|(k, _)| *k == id).map(|(_, p)| p)
    }

    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        encode_graph(self, &mut buf).expect("writing to memory");
        hex_digest(&buf)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Keyframes in id order plus the map points they observe.
#[derive(Clone, Debug)]
pub struct KeyframeStore {
    pub intrinsics: Intrinsics,
    keyframes: Vec<Keyframe>,
    map_points: BTreeMap<u64, MapPoint>,
    graph_seq: u64,
}

pub type SharedStore = Arc<RwLock<KeyframeStore>>;

impl KeyframeStore {
    pub fn new(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            keyframes: Vec::new(),
            map_points: BTreeMap::new(),
            graph_seq: 0,
        }
    }

    pub fn shared(self) -> SharedStore {
        Arc::new(RwLock::new(self))
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    pub fn get(&self, id: u64) -> Option<&Keyframe> {
        self.index_of(id).map(|i| &self.keyframes[i])
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut Keyframe> {
        self.index_of(id).map(move |i| &mut self.keyframes[i])
    }

    pub fn map_points(&self) -> &BTreeMap<u64, MapPoint> {
        &self.map_points
    }

    pub fn map_points_mut(&mut self) -> &mut BTreeMap<u64, MapPoint> {
        &mut self.map_points
    }

    pub fn set_val_loss(&mut self, id: u64, loss: f64) {
        if let Some(kf) = self.get_mut(id) {
            kf.last_val_loss = Some(loss);
        }
    }

    /// Appends a keyframe and registers its observations.
    ///
    /// A map point seen for the first time is placed by back-projecting its sparse
    /// depth from this keyframe.
    pub fn insert(&mut self, kf: Keyframe) -> Result<()> {
        kf.validate()?;
        if let Some(last) = self.keyframes.last() {
            if kf.id <= last.id {
                return Err(Error::Record(format!(
                    "keyframe id {} not greater than {}",
                    kf.id, last.id
                )));
            }
        }
        if kf.image.hw() != (self.intrinsics.height, self.intrinsics.width) {
            return Err(Error::Record(format!(
                "keyframe {} is {:?}, store expects {}x{}",
                kf.id,
                kf.image.hw(),
                self.intrinsics.height,
                self.intrinsics.width
            )));
        }
        for sp in &kf.sparse_points {
            let pixel = sp.pixel();
            match self.map_points.get_mut(&sp.map_point_id) {
                Some(mp) => mp.observations.push((kf.id, pixel)),
                None => {
                    let x = self.intrinsics.backproject(&pixel, sp.depth as f64)?;
                    self.map_points.insert(
                        sp.map_point_id,
                        MapPoint {
                            id: sp.map_point_id,
                            position: kf.pose.transform(&x),
                            observations: vec![(kf.id, pixel)],
                            host_kf: None,
                            culled: false,
                        },
                    );
                }
            }
        }
        self.keyframes.push(kf);
        Ok(())
    }

    /// Snapshot of current poses and non-culled map points with the next sequence number.
    pub fn snapshot(&mut self) -> KeyframeGraph {
        self.graph_seq += 1;
        KeyframeGraph {
            seq: self.graph_seq,
            poses: self.keyframes.iter().map(|k| (k.id, k.pose)).collect(),
            points: self
                .map_points
                .values()
                .filter(|m| !m.culled)
                .map(|m| (m.id, m.position))
                .collect(),
        }
    }

    /// Marks map points culled and drops them from keyframe sparse lists.
    pub fn mark_culled(&mut self, ids: &BTreeSet<u64>) {
        for id in ids {
            if let Some(mp) = self.map_points.get_mut(id) {
                mp.culled = true;
            }
        }
        for kf in &mut self.keyframes {
            kf.sparse_points
                .retain(|p| !ids.contains(&p.map_point_id));
        }
    }

    /// Adopts refined poses and point positions and refreshes sparse depths from them.
    ///
    /// Points observed in a keyframe but absent from the graph are left untouched.
    pub fn apply_graph(&mut self, graph: &KeyframeGraph) {
        for (id, pose) in &graph.poses {
            if let Some(kf) = self.get_mut(*id) {
                kf.pose = *pose;
            }
        }
        for (id, pos) in &graph.points {
            if let Some(mp) = self.map_points.get_mut(id) {
                mp.position = *pos;
            }
        }
        let refined: BTreeSet<u64> = graph.points.iter().map(|(id, _)| *id).collect();
        let map_points = &self.map_points;
        for kf in &mut self.keyframes {
            let c_from_w = kf.pose.inverse();
            kf.sparse_points.retain_mut(|sp| {
                if !refined.contains(&sp.map_point_id) {
                    return true;
                }
                let mp = &map_points[&sp.map_point_id];
                let z = c_from_w.transform(&mp.position).z;
                if z > 0.0 {
                    sp.depth = z as f32;
                    true
                } else {
                    false
                }
            });
        }
    }
}

/// Ordered fan-out to every live subscriber.
pub struct Channel<T> {
    name: &'static str,
    subscribers: Mutex<Vec<Sender<T>>>,
}

impl<T: Clone> Channel<T> {
    pub fn new(name: &'static str) -> Self {
        Self {
            name,
            subscribers: Mutex::new(Vec::new()),
        }
    }

    pub fn subscribe(&self) -> Receiver<T> {
        let (tx, rx) = channel();
        self.subscribers.lock().expect("channel lock").push(tx);
        rx
    }

    /// Returns the number of subscribers that received the message.
    pub fn publish(&self, msg: T) -> usize {
        let mut subs = self.subscribers.lock().expect("channel lock");
        let before = subs.len();
        subs.retain(|tx| tx.send(msg.clone()).is_ok());
        if subs.len() < before {
            log::warn!(
                "{}: dropped {} disconnected subscriber(s)",
                self.name,
                before - subs.len()
            );
        }
        subs.len()
    }
}

pub type KeyframeChannel = Channel<Arc<Keyframe>>;
pub type GraphChannel = Channel<Arc<KeyframeGraph>>;

fn put_pose(out: &mut Vec<u8>, pose: &PoseSE3) {
    for v in pose.to_array() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_pose<R: Read>(r: &mut R) -> Result<PoseSE3> {
    let mut a = [0.0; 7];
    for v in &mut a {
        *v = read_f64(r)?;
    }
    PoseSE3::from_array(a).map_err(|e| Error::Record(e.to_string()))
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

const HAS_GT_DEPTH: u8 = 1;
const HAS_GT_POSE: u8 = 2;
const HAS_VAL_LOSS: u8 = 4;

fn keyframe_body(kf: &Keyframe) -> Vec<u8> {
    let (h, w) = kf.image.hw();
    let mut out = Vec::with_capacity(64 + 8 * h * w + 20 * kf.sparse_points.len());
    out.extend_from_slice(KEYFRAME_MAGIC);
    out.extend_from_slice(&kf.id.to_le_bytes());
    put_pose(&mut out, &kf.pose);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    put_tensor(&mut out, &kf.image);
    out.extend_from_slice(&(kf.sparse_points.len() as u32).to_le_bytes());
    for p in &kf.sparse_points {
        out.extend_from_slice(&p.u.to_le_bytes());
        out.extend_from_slice(&p.v.to_le_bytes());
        out.extend_from_slice(&p.depth.to_le_bytes());
        out.extend_from_slice(&p.map_point_id.to_le_bytes());
    }
    // Trailer: timestamp and optional evaluation fields.
    out.extend_from_slice(&kf.timestamp.to_le_bytes());
    let mut flags = 0u8;
    if kf.gt_depth.is_some() {
        flags |= HAS_GT_DEPTH;
    }
    if kf.gt_pose.is_some() {
        flags |= HAS_GT_POSE;
    }
    if kf.last_val_loss.is_some() {
        flags |= HAS_VAL_LOSS;
    }
    out.push(flags);
    if let Some(d) = &kf.gt_depth {
        put_tensor(&mut out, d);
    }
    if let Some(p) = &kf.gt_pose {
        put_pose(&mut out, p);
    }
    if let Some(l) = kf.last_val_loss {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

fn decode_keyframe_body(body: &[u8]) -> Result<Keyframe> {
    let mut r = body;
    let magic = take_magic(&mut r)?;
    if &magic != KEYFRAME_MAGIC {
        return Err(Error::Record(format!("expected keyframe record, got {magic:?}")));
    }
    let id = read_u64(&mut r)?;
    let pose = get_pose(&mut r)?;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let image = Tensor::new([h, w], read_f32s(&mut r, h * w)?)?;
    let n = read_u32(&mut r)? as usize;
    let mut sparse_points = Vec::with_capacity(n);
    for _ in 0..n {
        let uvd = read_f32s(&mut r, 3)?;
        sparse_points.push(SparsePoint {
            u: uvd[0],
            v: uvd[1],
            depth: uvd[2],
            map_point_id: read_u64(&mut r)?,
        });
    }
    let timestamp = read_f64(&mut r)?;
    let mut flags = [0u8];
    r.read_exact(&mut flags)?;
    let gt_depth = if flags[0] & HAS_GT_DEPTH != 0 {
        Some(Tensor::new([h, w], read_f32s(&mut r, h * w)?)?)
    } else {
        None
    };
    let gt_pose = if flags[0] & HAS_GT_POSE != 0 {
        Some(get_pose(&mut r)?)
    } else {
        None
    };
    let last_val_loss = if flags[0] & HAS_VAL_LOSS != 0 {
        Some(read_f64(&mut r)?)
    } else {
        None
    };
    if !r.is_empty() {
        return Err(Error::Record(format!("{} trailing bytes", r.len())));
    }
    let kf = Keyframe {
        id,
        timestamp,
        image,
        pose,
        sparse_points,
        gt_depth,
        gt_pose,
        last_val_loss,
    };
    kf.validate()?;
    Ok(kf)
}

fn graph_body(g: &KeyframeGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GRAPH_MAGIC);
    out.extend_from_slice(&g.seq.to_le_bytes());
    out.extend_from_slice(&(g.poses.len() as u32).to_le_bytes());
    for (id, p) in &g.poses {
        out.extend_from_slice(&id.to_le_bytes());
        put_pose(&mut out, p);
    }
    out.extend_from_slice(&(g.points.len() as u32).to_le_bytes());
    for (id, x) in &g.points {
        out.extend_from_slice(&id.to_le_bytes());
        for c in x.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn decode_graph_body(body: &[u8]) -> Result<KeyframeGraph> {
    let mut r = body;
    let magic = take_magic(&mut r)?;
    if &magic != GRAPH_MAGIC {
        return Err(Error::Record(format!("expected graph record, got {magic:?}")));
    }
    let seq = read_u64(&mut r)?;
    let np = read_u32(&mut r)? as usize;
    let mut poses = Vec::with_capacity(np);
    for _ in 0..np {
        poses.push((read_u64(&mut r)?, get_pose(&mut r)?));
    }
    let nm = read_u32(&mut r)? as usize;
    let mut points = Vec::with_capacity(nm);
    for _ in 0..nm {
        let id = read_u64(&mut r)?;
        let x = Vector3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        points.push((id, x));
    }
    Ok(KeyframeGraph { seq, poses, points })
}

fn header_body(k: &Intrinsics) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HEADER_MAGIC);
    for v in [k.fx, k.fy, k.cx, k.cy] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(k.width as u32).to_le_bytes());
    out.extend_from_slice(&(k.height as u32).to_le_bytes());
    out
}

fn decode_header_body(body: &[u8]) -> Result<Intrinsics> {
    let mut r = &body[4..];
    let fx = read_f64(&mut r)?;
    let fy = read_f64(&mut r)?;
    let cx = read_f64(&mut r)?;
    let cy = read_f64(&mut r)?;
    let w = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    Intrinsics::new(fx, fy, cx, cy, w, h).map_err(|e| Error::Record(e.to_string()))
}

fn take_magic(r: &mut &[u8]) -> Result<[u8; 4]> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| Error::Record("truncated record".into()))?;
    Ok(m)
}

fn write_record<W: Write>(w: &mut W, body: &[u8]) -> Result<()> {
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    Ok(())
}

pub fn encode_keyframe<W: Write>(kf: &Keyframe, w: &mut W) -> Result<()> {
    write_record(w, &keyframe_body(kf))
}

pub fn encode_graph<W: Write>(g: &KeyframeGraph, w: &mut W) -> Result<()> {
    write_record(w, &graph_body(g))
}

pub fn decode_keyframe(bytes: &[u8]) -> Result<Keyframe> {
    match read_message(&mut &bytes[..])? {
        Some(Message::Keyframe(kf)) => Ok(kf),
        _ => Err(Error::Record("not a keyframe record".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Header(Intrinsics),
    Keyframe(Keyframe),
    Graph(KeyframeGraph),
}

/// Reads one length-prefixed record, `None` at a clean end of stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read(&mut len[..1])? {
        0 => return Ok(None),
        _ => r.read_exact(&mut len[1..])?,
    }
    let n = u32::from_le_bytes(len) as usize;
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)
        .map_err(|_| Error::Record("truncated record".into()))?;
    if body.len() < 4 {
        return Err(Error::Record("record shorter than its tag".into()));
    }
    let msg = match &body[..4] {
        m if m == KEYFRAME_MAGIC => Message::Keyframe(decode_keyframe_body(&body)?),
        m if m == GRAPH_MAGIC => Message::Graph(decode_graph_body(&body)?),
        m if m == HEADER_MAGIC => Message::Header(decode_header_body(&body)?),
        m => return Err(Error::Record(format!("unknown record tag {m:?}"))),
    };
    Ok(Some(msg))
}

/// Appends channel records to a replayable log.
pub struct MessageLog<W: Write> {
    out: W,
}

impl<W: Write> MessageLog<W> {
    pub fn new(mut out: W, intrinsics: &Intrinsics) -> Result<Self> {
        write_record(&mut out, &header_body(intrinsics))?;
        Ok(Self { out })
    }

    pub fn keyframe(&mut self, kf: &Keyframe) -> Result<()> {
        encode_keyframe(kf, &mut self.out)
    }

    pub fn graph(&mut self, g: &KeyframeGraph) -> Result<()> {
        encode_graph(g, &mut self.out)
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Intrinsics and keyframes from a message log, graphs ignored.
pub fn read_message_log(path: &Path) -> Result<(Intrinsics, Vec<Keyframe>)> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut r = std::io::BufReader::new(f);
    let intrinsics = match read_message(&mut r)? {
        Some(Message::Header(k)) => k,
        _ => return Err(Error::Record(format!("{} lacks a log header", path.display()))),
    };
    let mut kfs = Vec::new();
    while let Some(msg) = read_message(&mut r)? {
        if let Message::Keyframe(kf) = msg {
            kfs.push(kf);
        }
    }
    Ok((intrinsics, kfs))
}

/// Rotation-aware pose distance used to rank nearby keyframes.
pub fn pose_distance(a: &PoseSE3, b: &PoseSE3, rotation_weight: f64) -> f64 {
    let rel = a.inverse().compose(b);
    (a.translation - b.translation).norm() + rotation_weight * rel.rotation_angle()
}

pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> PoseSE3 {
    let z = (target - eye).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
    PoseSE3::new(UnitQuaternion::from_rotation_matrix(&rot), *eye)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kf(id: u64) -> Keyframe {
        Keyframe {
            id,
            timestamp: id as f64 * 0.1,
            image: Tensor::from_fn([4, 6], |i| i as f32 / 24.0),
            pose: PoseSE3::exp(&nalgebra::Vector6::new(0.1, -0.2, 0.3, 0.01, 0.02, -0.03)),
            sparse_points: vec![SparsePoint {
                u: 1.5,
                v: 2.25,
                depth: 1.75,
                map_point_id: 9,
            }],
            gt_depth: Some(Tensor::full([4, 6], 2.0)),
            gt_pose: Some(PoseSE3::identity()),
            last_val_loss: Some(0.125),
        }
    }

    fn intrinsics() -> Intrinsics {
        Intrinsics::new(5.0, 5.0, 2.5, 1.5, 6, 4).unwrap()
    }

    #[test]
    fn keyframe_round_trip_is_field_exact() {
        for k in [kf(3), Keyframe { gt_depth: None, gt_pose: None, last_val_loss: None, ..kf(4) }] {
            let mut buf = Vec::new();
            encode_keyframe(&k, &mut buf).unwrap();
            assert_eq!(&buf[4..8], KEYFRAME_MAGIC);
            assert_eq!(decode_keyframe(&buf).unwrap(), k);
        }
    }

    #[test]
    fn truncated_record_is_an_error() {
        let mut buf = Vec::new();
        encode_keyframe(&kf(1), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(decode_keyframe(&buf).is_err());
    }

    #[test]
    fn channel_delivers_in_order_and_drops_dead_subscribers() {
        let ch: Channel<u64> = Channel::new("test");
        let a = ch.subscribe();
        let b = ch.subscribe();
        drop(b);
        assert_eq!(ch.publish(0), 1);
        assert_eq!(ch.publish(1), 1);
        assert_eq!(a.try_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn store_builds_map_points_from_first_observation() {
        let mut store = KeyframeStore::new(intrinsics());
        store.insert(kf(0)).unwrap();
        store.insert(kf(1)).unwrap();
        assert!(store.insert(kf(1)).is_err());
        let mp = &store.map_points()[&9];
        assert_eq!(mp.observations.len(), 2);
        let k0 = store.get(0).unwrap();
        let z = k0.camera_from_world().transform(&mp.position).z;
        assert!((z - 1.75).abs() < 1e-6);
    }

    #[test]
    fn snapshots_are_immutable_and_sequenced() {
        let mut store = KeyframeStore::new(intrinsics());
        store.insert(kf(0)).unwrap();
        let g1 = store.snapshot();
        let sum = g1.checksum();
        store.get_mut(0).unwrap().pose = PoseSE3::identity();
        let g2 = store.snapshot();
        assert!(g2.seq > g1.seq);
        assert_eq!(g1.checksum(), sum);
        assert_ne!(g2.checksum(), sum);
    }

    #[test]
    fn applying_a_graph_updates_poses_and_sparse_depths() {
        let mut store = KeyframeStore::new(intrinsics());
        store.insert(kf(0)).unwrap();
        let mut g = store.snapshot();
        g.poses[0].1 = PoseSE3::identity();
        g.points[0].1 = Vector3::new(0.0, 0.0, 3.0);
        store.apply_graph(&g);
        let k = store.get(0).unwrap();
        assert_eq!(k.pose, PoseSE3::identity());
        assert_eq!(k.sparse_points[0].depth, 3.0);
    }

    #[test]
    fn culled_points_leave_sparse_lists() {
        let mut store = KeyframeStore::new(intrinsics());
        store.insert(kf(0)).unwrap();
        store.mark_culled(&BTreeSet::from([9]));
        assert!(store.get(0).unwrap().sparse_points.is_empty());
        assert!(store.map_points()[&9].culled);
        assert!(store.snapshot().points.is_empty());
    }

    #[test]
    fn message_log_replays() {
        let mut log = MessageLog::new(Vec::new(), &intrinsics()).unwrap();
        log.keyframe(&kf(0)).unwrap();
        let mut store = KeyframeStore::new(intrinsics());
        store.insert(kf(0)).unwrap();
        let g = store.snapshot();
        log.graph(&g).unwrap();
        log.keyframe(&kf(1)).unwrap();
        let bytes = log.into_inner().unwrap();
        let mut r = &bytes[..];
        let mut msgs = Vec::new();
        while let Some(m) = read_message(&mut r).unwrap() {
            msgs.push(m);
        }
        assert_eq!(
            msgs,
            vec![
                Message::Header(intrinsics()),
                Message::Keyframe(kf(0)),
                Message::Graph(g),
                Message::Keyframe(kf(1))
            ]
        );
    }

    #[test]
    fn look_at_points_the_optical_axis() {
        let eye = Vector3::new(1.0, 2.0, 3.0);
        let target = Vector3::new(1.0, 2.0, 7.0);
        let pose = look_at(&eye, &target, &Vector3::y());
        let c = pose.inverse().transform(&target);
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && (c.z - 4.0).abs() < 1e-12);
        // World up maps to image up (negative camera y).
        let up = pose.inverse().transform(&(eye + Vector3::y() + Vector3::z()));
        assert!(up.y < 0.0);
    }
}
