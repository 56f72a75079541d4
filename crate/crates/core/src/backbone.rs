//! Block-decomposed residual CNN with classifier head and SGD.
//!
//! The feature extractor is split into four residual blocks so the style
//! attack can enter before any block; `forward_from` runs the tail of the
//! network from a given block index, which is what the attack's inner loop
//! differentiates through. Desk-scale channel plan:
//!
//! ```text
//! image 3x32x32 -> stem 3->16 -> B1 16->16 s1 -> B2 16->32 s2
//!               -> B3 32->64 s2 -> B4 64->64 s1 -> GAP -> linear -> 10
//! ```
//!
//! The stem is fused into block 1, so "the feature before block i" has
//! channel count [3, 16, 32, 64] for i = 1..=4.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, RunRng};
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorId};

pub const NUM_BLOCKS: usize = 4;
pub const NUM_CLASSES: usize = 10;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
const STEM_OUT: usize = 16;
const HEAD_IN: usize = 64;
const BN_EPS: f64 = 1e-5;

/// Momentum of the running-statistics update in train mode.
pub const BN_MOMENTUM: f64 = 0.1;

/// (cin, cout, stride) of the residual blocks proper (the stem is separate).
const BLOCK_PLAN: [(usize, usize, usize); NUM_BLOCKS] =
    [(16, 16, 1), (16, 32, 2), (32, 64, 2), (64, 64, 1)];

/// Channel count of the feature entering block `i` (1-indexed); block 1 is
/// entered by the raw image.
pub fn block_input_channels(i: usize) -> Result<usize> {
    match i {
        1 => Ok(IMAGE_CHANNELS),
        2..=NUM_BLOCKS => Ok(BLOCK_PLAN[i - 2].1),
        _ => Err(Error::InvalidBlockIndex {
            index: i,
            max: NUM_BLOCKS,
        }),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    /// Batch statistics; optionally folds them into the running statistics.
    Train { track_running_stats: bool },
    /// Frozen running statistics; fully deterministic.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnParams<T> {
    fn identity(c: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub w: Vec<T>,
    pub w_shape: [usize; 4],
    pub stride: usize,
    pub pad: usize,
    pub bn: BnParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    pub proj: Option<ConvBn<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Vec<T>, // (in, out)
    pub b: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// All learnable weights plus batch-norm running statistics, for the feature
/// extractor and classifier jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub stem: ConvBn<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub head: Linear<T>,
}

fn kaiming_conv<T: Scalar>(rng: &mut RunRng, cout: usize, cin: usize, k: usize) -> Vec<T> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    (0..cout * cin * k * k)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            T::from_f64(z * std)
        })
        .collect()
}

fn conv_bn<T: Scalar>(rng: &mut RunRng, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn<T> {
    ConvBn {
        w: kaiming_conv(rng, cout, cin, k),
        w_shape: [cout, cin, k, k],
        stride,
        pad: k / 2,
        bn: BnParams::identity(cout),
    }
}

/// Kaiming fan-in initialization for all kernels, identity batch norms, and
/// zero classifier bias; deterministic per seed.
pub fn init_params<T: Scalar>(seed: u64) -> BackboneParams<T> {
    let mut rng = rng_from_seed(seed);
    let stem = conv_bn(&mut rng, IMAGE_CHANNELS, STEM_OUT, 3, 1);
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);
    for (cin, cout, stride) in BLOCK_PLAN {
        let conv1 = conv_bn(&mut rng, cin, cout, 3, stride);
        let conv2 = conv_bn(&mut rng, cout, cout, 3, 1);
        let proj = if cin != cout || stride != 1 {
            Some(conv_bn(&mut rng, cin, cout, 1, stride))
        } else {
            None
        };
        blocks.push(ResBlock { conv1, conv2, proj });
    }
    let head_std = (2.0 / HEAD_IN as f64).sqrt();
    let head = Linear {
        w: (0..HEAD_IN * NUM_CLASSES)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                T::from_f64(z * head_std)
            })
            .collect(),
        b: vec![T::zero(); NUM_CLASSES],
        in_dim: HEAD_IN,
        out_dim: NUM_CLASSES,
    };
    BackboneParams { stem, blocks, head }
}

// ---------------------------------------------------------------------------
// Parameter enumeration (canonical order shared by SGD, checkpoints, wiring)
// ---------------------------------------------------------------------------

fn push_params<'a, T: Scalar>(name: &str, cb: &'a ConvBn<T>, out: &mut Vec<(String, &'a Vec<T>)>) {
    out.push((alloc::format!("{name}.w"), &cb.w));
    out.push((alloc::format!("{name}.bn.gamma"), &cb.bn.gamma));
    out.push((alloc::format!("{name}.bn.beta"), &cb.bn.beta));
}

fn push_params_mut<'a, T: Scalar>(cb: &'a mut ConvBn<T>, out: &mut Vec<&'a mut Vec<T>>) {
    out.push(&mut cb.w);
    out.push(&mut cb.bn.gamma);
    out.push(&mut cb.bn.beta);
}

fn push_state<'a, T: Scalar>(
    name: &str,
    cb: &'a ConvBn<T>,
    out: &mut Vec<(String, Vec<usize>, &'a Vec<T>)>,
) {
    out.push((alloc::format!("{name}.w"), cb.w_shape.to_vec(), &cb.w));
    let c = cb.bn.gamma.len();
    out.push((alloc::format!("{name}.bn.gamma"), vec![c], &cb.bn.gamma));
    out.push((alloc::format!("{name}.bn.beta"), vec![c], &cb.bn.beta));
    out.push((alloc::format!("{name}.bn.running_mean"), vec![c], &cb.bn.running_mean));
    out.push((alloc::format!("{name}.bn.running_var"), vec![c], &cb.bn.running_var));
}

fn push_state_mut<'a, T: Scalar>(cb: &'a mut ConvBn<T>, out: &mut Vec<&'a mut Vec<T>>) {
    out.push(&mut cb.w);
    out.push(&mut cb.bn.gamma);
    out.push(&mut cb.bn.beta);
    out.push(&mut cb.bn.running_mean);
    out.push(&mut cb.bn.running_var);
}

/// Canonical (name, data) list of learnable tensors.
pub fn param_entries<T: Scalar>(p: &BackboneParams<T>) -> Vec<(String, &Vec<T>)> {
    let mut out: Vec<(String, &Vec<T>)> = Vec::new();
    push_params("stem", &p.stem, &mut out);
    for (bi, b) in p.blocks.iter().enumerate() {
        push_params(&alloc::format!("block{}.conv1", bi + 1), &b.conv1, &mut out);
        push_params(&alloc::format!("block{}.conv2", bi + 1), &b.conv2, &mut out);
        if let Some(pr) = &b.proj {
            push_params(&alloc::format!("block{}.proj", bi + 1), pr, &mut out);
        }
    }
    out.push(("head.w".into(), &p.head.w));
    out.push(("head.b".into(), &p.head.b));
    out
}

/// Mutable twin of [`param_entries`]; order is identical.
pub fn param_entries_mut<T: Scalar>(p: &mut BackboneParams<T>) -> Vec<&mut Vec<T>> {
    let mut out: Vec<&mut Vec<T>> = Vec::new();
    push_params_mut(&mut p.stem, &mut out);
    for b in p.blocks.iter_mut() {
        push_params_mut(&mut b.conv1, &mut out);
        push_params_mut(&mut b.conv2, &mut out);
        if let Some(pr) = b.proj.as_mut() {
            push_params_mut(pr, &mut out);
        }
    }
    out.push(&mut p.head.w);
    out.push(&mut p.head.b);
    out
}

/// (name, shape, data) of everything a checkpoint stores: learnable tensors
/// plus running statistics, in canonical order.
pub fn state_entries<T: Scalar>(p: &BackboneParams<T>) -> Vec<(String, Vec<usize>, &Vec<T>)> {
    let mut out: Vec<(String, Vec<usize>, &Vec<T>)> = Vec::new();
    push_state("stem", &p.stem, &mut out);
    for (bi, b) in p.blocks.iter().enumerate() {
        push_state(&alloc::format!("block{}.conv1", bi + 1), &b.conv1, &mut out);
        push_state(&alloc::format!("block{}.conv2", bi + 1), &b.conv2, &mut out);
        if let Some(pr) = &b.proj {
            push_state(&alloc::format!("block{}.proj", bi + 1), pr, &mut out);
        }
    }
    out.push((
        "head.w".into(),
        vec![p.head.in_dim, p.head.out_dim],
        &p.head.w,
    ));
    out.push(("head.b".into(), vec![p.head.out_dim], &p.head.b));
    out
}

/// Mutable state access in [`state_entries`] order, for checkpoint loading.
pub fn state_entries_mut<T: Scalar>(p: &mut BackboneParams<T>) -> Vec<&mut Vec<T>> {
    let mut out: Vec<&mut Vec<T>> = Vec::new();
    push_state_mut(&mut p.stem, &mut out);
    for b in p.blocks.iter_mut() {
        push_state_mut(&mut b.conv1, &mut out);
        push_state_mut(&mut b.conv2, &mut out);
        if let Some(pr) = b.proj.as_mut() {
            push_state_mut(pr, &mut out);
        }
    }
    out.push(&mut p.head.w);
    out.push(&mut p.head.b);
    out
}

// ---------------------------------------------------------------------------
// Graph wiring and forward passes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct WiredConvBn {
    pub w: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
    /// Index into the canonical batch-norm enumeration.
    pub bn_index: usize,
}

#[derive(Clone)]
pub struct WiredBlock {
    pub conv1: WiredConvBn,
    pub conv2: WiredConvBn,
    pub proj: Option<WiredConvBn>,
}

/// Parameter tensors materialized in a graph. Both forwarding paths of a
/// training step read these same nodes, which is what makes the two paths
/// share weights by construction.
#[derive(Clone)]
pub struct WiredBackbone {
    pub stem: WiredConvBn,
    pub blocks: Vec<WiredBlock>,
    pub head_w: TensorId,
    pub head_b: TensorId,
}

/// Batch statistics observed by one batch-norm layer during a train-mode
/// forward, tagged with its canonical index.
pub struct BnUpdate<T> {
    pub bn_index: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Copies parameters into the graph as leaves. `trainable` controls whether
/// gradients flow to the weights (the attack wires them frozen).
pub fn wire<T: Scalar>(
    g: &mut Graph<T>,
    p: &BackboneParams<T>,
    trainable: bool,
) -> Result<WiredBackbone> {
    let mut bn_counter = 0usize;
    let mut wire_cb = |g: &mut Graph<T>, cb: &ConvBn<T>| -> Result<WiredConvBn> {
        let w = g.input(&cb.w_shape, cb.w.clone(), trainable)?;
        let c = cb.bn.gamma.len();
        let gamma = g.input(&[c], cb.bn.gamma.clone(), trainable)?;
        let beta = g.input(&[c], cb.bn.beta.clone(), trainable)?;
        let bn_index = bn_counter;
        bn_counter += 1;
        Ok(WiredConvBn {
            w,
            gamma,
            beta,
            bn_index,
        })
    };
    let stem = wire_cb(g, &p.stem)?;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let conv1 = wire_cb(g, &b.conv1)?;
        let conv2 = wire_cb(g, &b.conv2)?;
        let proj = match &b.proj {
            Some(pr) => Some(wire_cb(g, pr)?),
            None => None,
        };
        blocks.push(WiredBlock { conv1, conv2, proj });
    }
    let head_w = g.input(
        &[p.head.in_dim, p.head.out_dim],
        p.head.w.clone(),
        trainable,
    )?;
    let head_b = g.input(&[p.head.out_dim], p.head.b.clone(), trainable)?;
    Ok(WiredBackbone {
        stem,
        blocks,
        head_w,
        head_b,
    })
}

/// Per-BN parameter views in wiring order, used to resolve `bn_index`.
fn bn_params_in_order<T: Scalar>(p: &BackboneParams<T>) -> Vec<&BnParams<T>> {
    let mut out = vec![&p.stem.bn];
    for b in &p.blocks {
        out.push(&b.conv1.bn);
        out.push(&b.conv2.bn);
        if let Some(pr) = &b.proj {
            out.push(&pr.bn);
        }
    }
    out
}

fn bn_params_in_order_mut<T: Scalar>(p: &mut BackboneParams<T>) -> Vec<&mut BnParams<T>> {
    let mut out = vec![&mut p.stem.bn];
    for b in p.blocks.iter_mut() {
        out.push(&mut b.conv1.bn);
        out.push(&mut b.conv2.bn);
        if let Some(pr) = b.proj.as_mut() {
            out.push(&mut pr.bn);
        }
    }
    out
}

/// conv -> BN for one wired conv; BN uses batch statistics in train mode and
/// running statistics in eval mode.
fn conv_bn_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BackboneParams<T>,
    cb_params: &ConvBn<T>,
    cb: &WiredConvBn,
    x: TensorId,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<TensorId> {
    let y = g.conv2d(x, cb.w, cb_params.stride, cb_params.pad)?;
    match mode {
        Mode::Train { track_running_stats } => {
            let out = g.batch_norm_train(y, cb.gamma, cb.beta, T::from_f64(BN_EPS))?;
            if track_running_stats {
                let stats = g.bn_batch_stats(out).expect("train BN node");
                updates.push(BnUpdate {
                    bn_index: cb.bn_index,
                    mean: stats.mean,
                    var: stats.var,
                });
            }
            Ok(out)
        }
        Mode::Eval => {
            let bn = bn_params_in_order(p)[cb.bn_index];
            let c = bn.gamma.len();
            let eps = T::from_f64(BN_EPS);
            let coef: Vec<T> = bn
                .gamma
                .iter()
                .zip(&bn.running_var)
                .map(|(&gm, &rv)| gm / (rv + eps).sqrt())
                .collect();
            let bias: Vec<T> = bn
                .beta
                .iter()
                .zip(&coef)
                .zip(&bn.running_mean)
                .map(|((&bt, &cf), &rm)| bt - cf * rm)
                .collect();
            let coef = g.constant(&[c], coef)?;
            let bias = g.constant(&[c], bias)?;
            let scaled = g.mul_c(y, coef)?;
            g.add_c(scaled, bias)
        }
    }
}

/// Residual block `i` in 1..=4 (block 1 includes the stem). Input must carry
/// the channel count of the plan.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BackboneParams<T>,
    wired: &WiredBackbone,
    x: TensorId,
    i: usize,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<TensorId> {
    let cin = block_input_channels(i)?;
    if g.shape(x).len() != 4 || g.shape(x)[1] != cin {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            lhs: g.shape(x).to_vec(),
            rhs: vec![0, cin, 0, 0],
        });
    }
    let mut x = x;
    if i == 1 {
        let s = conv_bn_forward(g, p, &p.stem, &wired.stem, x, mode, updates)?;
        x = g.relu(s);
    }
    let bp = &p.blocks[i - 1];
    let bw = &wired.blocks[i - 1];
    let y1 = conv_bn_forward(g, p, &bp.conv1, &bw.conv1, x, mode, updates)?;
    let y1 = g.relu(y1);
    let y2 = conv_bn_forward(g, p, &bp.conv2, &bw.conv2, y1, mode, updates)?;
    let skip = match (&bp.proj, &bw.proj) {
        (Some(pp), Some(pw)) => conv_bn_forward(g, p, pp, pw, x, mode, updates)?,
        _ => x,
    };
    let sum = g.add(y2, skip)?;
    Ok(g.relu(sum))
}

/// Classifier head: global average pooling then a linear layer.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    wired: &WiredBackbone,
    x: TensorId,
) -> Result<TensorId> {
    let pooled = g.mean_hw(x)?;
    let logits = g.matmul(pooled, wired.head_w)?;
    g.add_c(logits, wired.head_b)
}

/// Runs blocks `i..=4` and the classifier on the feature entering block `i`;
/// `i = 5` applies the classifier only. `forward_from(.., image, 1, ..)` is
/// the full forward pass.
#[allow(clippy::too_many_arguments)]
pub fn forward_from<T: Scalar>(
    g: &mut Graph<T>,
    p: &BackboneParams<T>,
    wired: &WiredBackbone,
    x: TensorId,
    i: usize,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<TensorId> {
    if i > NUM_BLOCKS + 1 || i == 0 {
        return Err(Error::InvalidBlockIndex {
            index: i,
            max: NUM_BLOCKS + 1,
        });
    }
    let mut x = x;
    for b in i..=NUM_BLOCKS {
        x = block_forward(g, p, wired, x, b, mode, updates)?;
    }
    head_forward(g, wired, x)
}

/// Folds observed batch statistics into the running statistics.
pub fn apply_bn_updates<T: Scalar>(p: &mut BackboneParams<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - m;
    let mut bns = bn_params_in_order_mut(p);
    for u in updates {
        let bn = &mut bns[u.bn_index];
        for (r, &b) in bn.running_mean.iter_mut().zip(&u.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in bn.running_var.iter_mut().zip(&u.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Collects weight gradients in canonical parameter order after a backward
/// pass. Errors if any weight is missing a gradient.
pub fn grads_in_order<T: Scalar>(g: &Graph<T>, wired: &WiredBackbone) -> Result<Vec<Vec<T>>> {
    let mut ids: Vec<TensorId> = Vec::new();
    let mut push_cb = |cb: &WiredConvBn, ids: &mut Vec<TensorId>| {
        ids.push(cb.w);
        ids.push(cb.gamma);
        ids.push(cb.beta);
    };
    push_cb(&wired.stem, &mut ids);
    for b in &wired.blocks {
        push_cb(&b.conv1, &mut ids);
        push_cb(&b.conv2, &mut ids);
        if let Some(pr) = &b.proj {
            push_cb(pr, &mut ids);
        }
    }
    ids.push(wired.head_w);
    ids.push(wired.head_b);
    ids.iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .ok_or(Error::Invalid("missing weight gradient".into()))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Classical momentum SGD state: one velocity buffer per learnable tensor.
pub struct SgdState<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(p: &BackboneParams<T>) -> Self {
        SgdState {
            velocity: param_entries(p)
                .iter()
                .map(|(_, v)| vec![T::zero(); v.len()])
                .collect(),
        }
    }
}

/// `v <- m*v + g; p <- p - lr*v`. A non-finite gradient rejects the whole
/// step and leaves parameters untouched.
pub fn sgd_step<T: Scalar>(
    p: &mut BackboneParams<T>,
    grads: &[Vec<T>],
    state: &mut SgdState<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    let entries = param_entries_mut(p);
    if grads.len() != entries.len() {
        return Err(Error::Invalid(alloc::format!(
            "sgd_step: {} gradient tensors for {} parameters",
            grads.len(),
            entries.len()
        )));
    }
    for (g, e) in grads.iter().zip(&entries) {
        if g.len() != e.len() {
            return Err(Error::Invalid("sgd_step: gradient shape mismatch".into()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight gradient"));
        }
    }
    for ((param, grad), vel) in entries.into_iter().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// Step-decay learning rate schedule: `base` before `decay_epoch`, then
/// `base * decay` (epochs are 0-indexed).
pub fn lr_at_epoch(base: f64, decay: f64, decay_epoch: usize, epoch: usize) -> f64 {
    if epoch >= decay_epoch {
        base * decay
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_batch(n: usize) -> Vec<f32> {
        (0..n * IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE)
            .map(|i| ((i as f32) * 0.37).sin() * 0.5 + 0.5)
            .collect()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a: BackboneParams<f32> = init_params(7);
        let b: BackboneParams<f32> = init_params(7);
        assert_eq!(a, b);
        let c: BackboneParams<f32> = init_params(8);
        assert_ne!(a, c);
    }

    #[test]
    fn classifier_bias_starts_at_zero() {
        let p: BackboneParams<f32> = init_params(0);
        assert!(p.head.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_forward_equals_forward_from_one() {
        let p: BackboneParams<f32> = init_params(3);
        let data = tiny_batch(2);
        let run = |i: usize| {
            let mut g: Graph<f32> = Graph::new();
            let wired = wire(&mut g, &p, false).unwrap();
            let x = g.input(&[2, 3, 32, 32], data.clone(), false).unwrap();
            let mut ups = Vec::new();
            let mut f = x;
            for b in 1..i {
                f = block_forward(&mut g, &p, &wired, f, b, Mode::Eval, &mut ups).unwrap();
            }
            let logits = forward_from(&mut g, &p, &wired, f, i, Mode::Eval, &mut ups).unwrap();
            g.value(logits).to_vec()
        };
        let full = run(1);
        for i in 2..=5 {
            let part = run(i);
            assert_eq!(full, part, "composition identity broken at i={i}");
        }
    }

    #[test]
    fn block_shapes_follow_plan() {
        let p: BackboneParams<f32> = init_params(1);
        let mut g: Graph<f32> = Graph::new();
        let wired = wire(&mut g, &p, false).unwrap();
        let x = g.input(&[1, 3, 32, 32], tiny_batch(1), false).unwrap();
        let mut ups = Vec::new();
        let b1 = block_forward(&mut g, &p, &wired, x, 1, Mode::Eval, &mut ups).unwrap();
        assert_eq!(g.shape(b1), &[1, 16, 32, 32]); // stride 1 preserves H, W
        let b2 = block_forward(&mut g, &p, &wired, b1, 2, Mode::Eval, &mut ups).unwrap();
        assert_eq!(g.shape(b2), &[1, 32, 16, 16]); // stride 2 halves
        let b3 = block_forward(&mut g, &p, &wired, b2, 3, Mode::Eval, &mut ups).unwrap();
        assert_eq!(g.shape(b3), &[1, 64, 8, 8]);
        let b4 = block_forward(&mut g, &p, &wired, b3, 4, Mode::Eval, &mut ups).unwrap();
        assert_eq!(g.shape(b4), &[1, 64, 8, 8]);
    }

    #[test]
    fn eval_forward_is_idempotent() {
        let p: BackboneParams<f32> = init_params(5);
        let data = tiny_batch(2);
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let wired = wire(&mut g, &p, false).unwrap();
            let x = g.input(&[2, 3, 32, 32], data.clone(), false).unwrap();
            let mut ups = Vec::new();
            let logits = forward_from(&mut g, &p, &wired, x, 1, Mode::Eval, &mut ups).unwrap();
            g.value(logits).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p: BackboneParams<f32> = init_params(2);
        let mut g: Graph<f32> = Graph::new();
        let wired = wire(&mut g, &p, false).unwrap();
        let x = g.zeros(&[1, 16, 32, 32]);
        let mut ups = Vec::new();
        assert!(block_forward(&mut g, &p, &wired, x, 1, Mode::Eval, &mut ups).is_err());
        assert!(forward_from(&mut g, &p, &wired, x, 6, Mode::Eval, &mut ups).is_err());
    }

    #[test]
    fn sgd_momentum_zero_is_plain_descent() {
        let mut p: BackboneParams<f32> = init_params(4);
        let before = p.head.b.clone();
        let mut state = SgdState::new(&p);
        let entries = param_entries(&p);
        let mut grads: Vec<Vec<f32>> = entries.iter().map(|(_, v)| vec![0.0; v.len()]).collect();
        let head_b_idx = grads.len() - 1;
        grads[head_b_idx] = vec![1.0; NUM_CLASSES];
        sgd_step(&mut p, &grads, &mut state, 0.1, 0.0).unwrap();
        for (a, b) in p.head.b.iter().zip(&before) {
            assert!((a - (b - 0.1)).abs() < 1e-7);
        }
    }

    #[test]
    fn sgd_zero_gradient_zero_velocity_is_noop() {
        let mut p: BackboneParams<f32> = init_params(4);
        let before = p.clone();
        let mut state = SgdState::new(&p);
        let grads: Vec<Vec<f32>> = param_entries(&p)
            .iter()
            .map(|(_, v)| vec![0.0; v.len()])
            .collect();
        sgd_step(&mut p, &grads, &mut state, 0.5, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_rejects_nan_gradient() {
        let mut p: BackboneParams<f32> = init_params(4);
        let before = p.clone();
        let mut state = SgdState::new(&p);
        let mut grads: Vec<Vec<f32>> = param_entries(&p)
            .iter()
            .map(|(_, v)| vec![0.0; v.len()])
            .collect();
        grads[0][0] = f32::NAN;
        assert!(matches!(
            sgd_step(&mut p, &grads, &mut state, 0.1, 0.9),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, before, "rejected step must not touch parameters");
    }

    #[test]
    fn lr_schedule_decays_after_epoch_30() {
        assert_eq!(lr_at_epoch(0.0005, 0.1, 30, 0), 0.0005);
        assert_eq!(lr_at_epoch(0.0005, 0.1, 30, 29), 0.0005);
        assert!((lr_at_epoch(0.0005, 0.1, 30, 30) - 0.00005).abs() < 1e-12);
        assert!((lr_at_epoch(0.0005, 0.1, 30, 59) - 0.00005).abs() < 1e-12);
    }

    #[test]
    fn single_sgd_step_decreases_separable_toy_loss() {
        // Linear classifier over linearly separable points, lr 1e-3.
        let w0 = vec![0.05f64, -0.03, 0.02, 0.04, -0.01, 0.03];
        let xs = vec![1.0f64, 2.0, -1.5, 0.5, 2.0, -1.0, -1.3, 2.2, 1.4, -2.0, 0.3, 1.1];
        let ys = [0usize, 1, 0, 1];
        let loss_and_grad = |w: &[f64]| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.input(&[4, 3], xs.clone(), false).unwrap();
            let wt = g.input(&[3, 2], w.to_vec(), true).unwrap();
            let logits = g.matmul(x, wt).unwrap();
            let loss = g.cross_entropy(logits, &ys).unwrap();
            let lv = g.value(loss)[0];
            g.backward(loss).unwrap();
            (lv, g.grad(wt).unwrap().to_vec())
        };
        let (l0, grad) = loss_and_grad(&w0);
        let w1: Vec<f64> = w0.iter().zip(&grad).map(|(w, g)| w - 1e-3 * g).collect();
        let (l1, _) = loss_and_grad(&w1);
        assert!(l1 < l0, "loss must strictly decrease: {l0} -> {l1}");
    }

    #[test]
    fn param_and_state_orders_align() {
        let mut p: BackboneParams<f32> = init_params(0);
        let names: Vec<String> = param_entries(&p).into_iter().map(|(n, _)| n).collect();
        let lens_a: Vec<usize> = param_entries(&p).iter().map(|(_, v)| v.len()).collect();
        let lens_b: Vec<usize> = param_entries_mut(&mut p).iter().map(|v| v.len()).collect();
        assert_eq!(lens_a, lens_b);
        assert!(names.contains(&"block2.proj.w".into()));
        assert!(!names.iter().any(|n| n.contains("block1.proj")));
        let state_names: Vec<String> = state_entries(&p).into_iter().map(|(n, _, _)| n).collect();
        assert!(state_names.contains(&"stem.bn.running_mean".into()));
        let lens_c: Vec<usize> = state_entries(&p).iter().map(|(_, _, v)| v.len()).collect();
        let lens_d: Vec<usize> = state_entries_mut(&mut p).iter().map(|v| v.len()).collect();
        assert_eq!(lens_c, lens_d);
    }
}
