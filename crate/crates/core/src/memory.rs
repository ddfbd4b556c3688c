//! Stage II: key/value embedding of frames, external memory over past
//! frames, the softmax attention read block and the refinement decoder.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Arr, Tape, Var};

/// Key/value feature maps of one frame, [C_k,H',W'] and [C_v,H',W'].
#[derive(Debug, Clone)]
pub struct KeyValueMaps {
    pub key: Arr,
    pub value: Arr,
}

impl KeyValueMaps {
    pub fn spatial(&self) -> (usize, usize) {
        (self.key.shape()[1], self.key.shape()[2])
    }
}

/// Temporally concatenated key/value maps of past frames. Append-only
/// within a clip; an optional capacity evicts oldest entries first.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    keys: Vec<Arr>,
    values: Vec<Arr>,
    capacity: Option<usize>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_limit(capacity: usize) -> Self {
        Self { capacity: Some(capacity), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn entry(&self, t: usize) -> (&Arr, &Arr) {
        (&self.keys[t], &self.values[t])
    }

    pub fn write(&mut self, kv: &KeyValueMaps) -> Result<()> {
        if let Some(first) = self.keys.first() {
            if first.shape()[1..] != kv.key.shape()[1..] {
                return Err(Error::shape(format!(
                    "memory write spatial mismatch: store {:?}, new {:?}",
                    &first.shape()[1..],
                    &kv.key.shape()[1..]
                )));
            }
        }
        self.keys.push(kv.key.clone());
        self.values.push(kv.value.clone());
        if let Some(cap) = self.capacity {
            while self.keys.len() > cap {
                self.keys.remove(0);
                self.values.remove(0);
            }
        }
        Ok(())
    }
}

/// Memory read over tape variables: for each current location i,
/// softmax(k_i^C . k_j^M) over all T*H'*W' memory locations j weights the
/// memory values; the output concatenates [v^C, retrieved] along channels.
pub fn memory_read_tape(
    tape: &mut Tape,
    key_c: Var,
    value_c: Var,
    mem_keys: &[Var],
    mem_values: &[Var],
) -> Var {
    assert!(!mem_keys.is_empty(), "memory must hold at least one frame");
    assert_eq!(mem_keys.len(), mem_values.len());
    let kshape = tape.value(key_c).shape().to_vec();
    let (ck, h, w) = (kshape[0], kshape[1], kshape[2]);
    let cv = tape.value(value_c).shape()[0];
    let hw = h * w;

    // q: [HW, Ck]
    let q2 = tape.reshape(key_c, &[ck, hw]);
    let q = tape.transpose2(q2);
    // K: [T*HW, Ck], V: [T*HW, Cv]
    let mut krows = Vec::new();
    let mut vrows = Vec::new();
    for (&km, &vm) in mem_keys.iter().zip(mem_values) {
        let k2 = tape.reshape(km, &[ck, hw]);
        krows.push(tape.transpose2(k2));
        let v2 = tape.reshape(vm, &[cv, hw]);
        vrows.push(tape.transpose2(v2));
    }
    let kmat = tape.concat(0, &krows);
    let vmat = tape.concat(0, &vrows);
    let kt = tape.transpose2(kmat);
    let scores = tape.matmul(q, kt); // [HW, T*HW]
    let attn = tape.softmax_rows(scores);
    let retrieved = tape.matmul(attn, vmat); // [HW, Cv]
    let rt = tape.transpose2(retrieved);
    let rmap = tape.reshape(rt, &[cv, h, w]);
    tape.concat(0, &[value_c, rmap])
}

/// Plain-array memory read (inference-style), enforcing the preconditions
/// of the read block.
pub fn memory_read(current: &KeyValueMaps, store: &MemoryStore) -> Result<Arr> {
    if store.is_empty() {
        return Err(Error::Config("memory read on empty store; caller handles frame 0".to_string()));
    }
    let (h, w) = current.spatial();
    for t in 0..store.len() {
        let (k, _) = store.entry(t);
        if (k.shape()[1], k.shape()[2]) != (h, w) {
            return Err(Error::shape("memory spatial size mismatch".to_string()));
        }
    }
    let mut tape = Tape::new();
    let kc = tape.constant(current.key.clone());
    let vc = tape.constant(current.value.clone());
    let mks: Vec<Var> = (0..store.len()).map(|t| tape.constant(store.entry(t).0.clone())).collect();
    let mvs: Vec<Var> = (0..store.len()).map(|t| tape.constant(store.entry(t).1.clone())).collect();
    let y = memory_read_tape(&mut tape, kc, vc, &mks, &mvs);
    Ok(tape.value(y).clone())
}

/// Attention weights for each query location, rows summing to 1; used by
/// tests and diagnostics.
pub fn attention_weights(current: &KeyValueMaps, store: &MemoryStore) -> Result<ndarray::Array2<f64>> {
    if store.is_empty() {
        return Err(Error::Config("empty memory".to_string()));
    }
    let (h, w) = current.spatial();
    let ck = current.key.shape()[0];
    let hw = h * w;
    let mut tape = Tape::new();
    let kc = tape.constant(current.key.clone());
    let q2 = tape.reshape(kc, &[ck, hw]);
    let q = tape.transpose2(q2);
    let mut krows = Vec::new();
    for t in 0..store.len() {
        let km = tape.constant(store.entry(t).0.clone());
        let k2 = tape.reshape(km, &[ck, hw]);
        krows.push(tape.transpose2(k2));
    }
    let kmat = tape.concat(0, &krows);
    let kt = tape.transpose2(kmat);
    let scores = tape.matmul(q, kt);
    let attn = tape.softmax_rows(scores);
    Ok(tape
        .value(attn)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

// ---- networks ----

/// Weight-shared kv encoder and the refinement decoder.
#[derive(Debug, Clone)]
pub struct RefineNets {
    pub arch: ArchConfig,
    enc0: Conv2d,
    enc1: Conv2d,
    dec0: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    out: Conv2d,
}

impl RefineNets {
    pub fn new(arch: &ArchConfig) -> Self {
        let cv = arch.kv_value_channels;
        let ck = arch.kv_key_channels();
        let hidden = cv;
        Self {
            arch: arch.clone(),
            enc0: Conv2d::new("refine.enc0", 3, hidden, 3, 2, true),
            enc1: Conv2d::new("refine.enc1", hidden, ck + cv, 3, 2, true),
            dec0: Conv2d::new("refine.dec0", 2 * cv, hidden, 3, 1, true),
            dec1: Conv2d::new("refine.dec1", hidden + hidden, hidden, 3, 1, true),
            dec2: Conv2d::new("refine.dec2", hidden + 3, hidden, 3, 1, true),
            out: Conv2d::new("refine.out", hidden, 3, 3, 1, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for c in [&self.enc0, &self.enc1, &self.dec0, &self.dec1, &self.dec2] {
            c.init(store, rng);
        }
        // zero residual head: the refiner starts as the exact identity
        self.out.init_zero(store);
    }

    /// Encode a frame [1,3,H,W] into (key, value, skip) tape vars:
    /// key [1,Ck,H/4,W/4], value [1,Cv,H/4,W/4], skip at H/2.
    pub fn encode_kv_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: Var,
        frozen: bool,
    ) -> (Var, Var, Var) {
        let h0 = self.enc0.forward(tape, store, frame, frozen);
        let skip = tape.leaky_relu(h0, 0.2);
        let h1 = self.enc1.forward(tape, store, skip, frozen);
        let ck = self.arch.kv_key_channels();
        let cv = self.arch.kv_value_channels;
        let key = tape.slice_axis(h1, 1, 0, ck);
        let value = tape.slice_axis(h1, 1, ck, cv);
        (key, value, skip)
    }

    /// Decode the read output plus skip features back to an RGB frame.
    pub fn decode_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        read: Var,
        skip: Var,
        frame: Var,
        frozen: bool,
    ) -> Var {
        let d0 = self.dec0.forward(tape, store, read, frozen);
        let d0 = tape.leaky_relu(d0, 0.2);
        let up0 = tape.upsample_nearest2(d0);
        let cat0 = tape.concat(1, &[up0, skip]);
        let d1 = self.dec1.forward(tape, store, cat0, frozen);
        let d1 = tape.leaky_relu(d1, 0.2);
        let up1 = tape.upsample_nearest2(d1);
        let cat1 = tape.concat(1, &[up1, frame]);
        let d2 = self.dec2.forward(tape, store, cat1, frozen);
        let d2 = tape.leaky_relu(d2, 0.2);
        let o = self.out.forward(tape, store, d2, frozen);
        // residual correction of the input frame keeps the refiner close
        // to the identity at initialization
        let t = tape.tanh(o);
        let delta = tape.scale(t, 0.5);
        let sum = tape.add(frame, delta);
        tape.clamp(sum, 0.0, 1.0)
    }

    /// Run the full refinement over an ordered clip of stage-I frames on
    /// one tape. Frame 0 self-reads; each frame's own (input) kv is what
    /// gets written to memory. Returns the refined frame vars.
    pub fn refine_clip_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[Var],
        frozen: bool,
    ) -> Vec<Var> {
        assert!(!frames.is_empty(), "empty clip");
        let mut mem_keys: Vec<Var> = Vec::new();
        let mut mem_values: Vec<Var> = Vec::new();
        let mut out = Vec::new();
        for (t, &frame) in frames.iter().enumerate() {
            let (key_b, value_b, skip) = self.encode_kv_tape(tape, store, frame, frozen);
            // the read block works on unbatched [C,H',W'] maps
            let ks = shape_wo_batch(tape.value(key_b).shape());
            let key = tape.reshape(key_b, &ks);
            let vs = shape_wo_batch(tape.value(value_b).shape());
            let value = tape.reshape(value_b, &vs);
            if t == 0 {
                // self-read: the first frame attends to itself
                mem_keys.push(key);
                mem_values.push(value);
            }
            let read = memory_read_tape(tape, key, value, &mem_keys, &mem_values);
            let rs = tape.value(read).shape().to_vec();
            let read4 = tape.reshape(read, &[1, rs[0], rs[1], rs[2]]);
            let refined = self.decode_tape(tape, store, read4, skip, frame, frozen);
            out.push(refined);
            if t > 0 {
                mem_keys.push(key);
                mem_values.push(value);
            }
        }
        out
    }
}

/// Array-level kv encoding of one frame [3,H,W].
pub fn encode_kv(nets: &RefineNets, store: &ParamStore, frame: &Arr) -> Result<KeyValueMaps> {
    if frame.ndim() != 3 || frame.shape()[0] != 3 {
        return Err(Error::shape(format!("expected [3,H,W] frame, got {:?}", frame.shape())));
    }
    let mut tape = Tape::new();
    let batched = frame.clone().insert_axis(ndarray::Axis(0));
    let fv = tape.constant(batched);
    let (k, v, _) = nets.encode_kv_tape(&mut tape, store, fv, true);
    Ok(KeyValueMaps {
        key: tape.value(k).clone().remove_axis(ndarray::Axis(0)),
        value: tape.value(v).clone().remove_axis(ndarray::Axis(0)),
    })
}

/// Refine an ordered list of stage-I frames ([3,H,W] each).
pub fn refine_clip(nets: &RefineNets, store: &ParamStore, frames: &[Arr]) -> Result<Vec<Arr>> {
    if frames.is_empty() {
        return Err(Error::Config("refine_clip requires at least one frame".to_string()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = frames
        .iter()
        .map(|f| {
            let b = f.clone().insert_axis(ndarray::Axis(0));
            tape.constant(b)
        })
        .collect();
    let refined = nets.refine_clip_tape(&mut tape, store, &vars, true);
    Ok(refined
        .into_iter()
        .map(|v| tape.value(v).clone().remove_axis(ndarray::Axis(0)))
        .collect())
}

/// Refine a single frame against an existing memory store.
pub fn refine_frame(nets: &RefineNets, store: &ParamStore, frame: &Arr, mem: &MemoryStore) -> Result<Arr> {
    if mem.is_empty() {
        return Err(Error::Config("refine_frame needs a non-empty memory".to_string()));
    }
    let mut tape = Tape::new();
    let batched = frame.clone().insert_axis(ndarray::Axis(0));
    let fv = tape.constant(batched);
    let (key, value, skip) = nets.encode_kv_tape(&mut tape, store, fv, true);
    let mks: Vec<Var> = (0..mem.len())
        .map(|t| {
            let k = mem.entry(t).0.clone().insert_axis(ndarray::Axis(0));
            tape.constant(k)
        })
        .collect();
    let mvs: Vec<Var> = (0..mem.len())
        .map(|t| {
            let v = mem.entry(t).1.clone().insert_axis(ndarray::Axis(0));
            tape.constant(v)
        })
        .collect();
    // batched maps: flatten the leading batch axis into the read
    let kb = tape.reshape(key, &shape_wo_batch(tape.value(key).shape()));
    let vb = tape.reshape(value, &shape_wo_batch(tape.value(value).shape()));
    let mks: Vec<Var> = mks
        .into_iter()
        .map(|v| {
            let s = shape_wo_batch(tape.value(v).shape());
            tape.reshape(v, &s)
        })
        .collect();
    let mvs: Vec<Var> = mvs
        .into_iter()
        .map(|v| {
            let s = shape_wo_batch(tape.value(v).shape());
            tape.reshape(v, &s)
        })
        .collect();
    let read = memory_read_tape(&mut tape, kb, vb, &mks, &mvs);
    let shape = tape.value(read).shape().to_vec();
    let read4 = tape.reshape(read, &[1, shape[0], shape[1], shape[2]]);
    let refined = nets.decode_tape(&mut tape, store, read4, skip, fv, true);
    Ok(tape.value(refined).clone().remove_axis(ndarray::Axis(0)))
}

fn shape_wo_batch(s: &[usize]) -> Vec<usize> {
    assert_eq!(s[0], 1);
    s[1..].to_vec()
}

/// Brute-force double-loop evaluation of the read block (test oracle).
pub fn memory_read_bruteforce(current: &KeyValueMaps, store: &MemoryStore) -> Arr {
    let (h, w) = current.spatial();
    let ck = current.key.shape()[0];
    let cv = current.value.shape()[0];
    let t_n = store.len();
    let mut out = Arr::zeros(IxDyn(&[2 * cv, h, w]));
    for y in 0..h {
        for x in 0..w {
            // raw exp similarities against every memory location
            let mut sims = Vec::with_capacity(t_n * h * w);
            for t in 0..t_n {
                let (mk, _) = store.entry(t);
                for ym in 0..h {
                    for xm in 0..w {
                        let mut dot = 0.0;
                        for c in 0..ck {
                            dot += current.key[[c, y, x]] * mk[[c, ym, xm]];
                        }
                        sims.push(dot);
                    }
                }
            }
            let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = sims.iter().map(|s| (s - m).exp()).sum();
            for c in 0..cv {
                out[[c, y, x]] = current.value[[c, y, x]];
                let mut acc = 0.0;
                let mut idx = 0;
                for t in 0..t_n {
                    let (_, mv) = store.entry(t);
                    for ym in 0..h {
                        for xm in 0..w {
                            acc += (sims[idx] - m).exp() / z * mv[[c, ym, xm]];
                            idx += 1;
                        }
                    }
                }
                out[[cv + c, y, x]] = acc;
            }
        }
    }
    out
}
