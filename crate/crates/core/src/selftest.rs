//! Built-in invariant checks, run by `nlroi selftest`.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{forward_traced, grad_check, CheckDims};
use crate::block::{
    correlation, g_feature_map, g_transform, init_params, attention_mix, nlroi_forward, BlockDims,
};
use crate::error::Result;
use crate::io::{decode_blob, encode_blob, AnyTensor};
use crate::tensor::{conv1x1, conv3x3, flatten_rois, global_avg_pool, matmul, row_softmax, Tensor};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 10] = [
    ("gradients match finite differences", gradients),
    ("attention rows are stochastic and positive", attention_rows),
    ("permutation equivariance", equivariance),
    ("pool/mix commutation", commutation),
    ("input channels pass through unchanged", identity_preservation),
    ("conv1x1 equals center-tap conv3x3", center_tap),
    ("correlation equals matrix self-attention", self_attention_form),
    ("traced forward is bit-identical and replayable", traced_forward),
    ("concurrent forwards are bit-identical", concurrency),
    ("blob round-trip is bit-exact", blob_roundtrip),
];

/// Runs every check; a check that errors counts as failed.
pub fn run() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| match check() {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradients() -> Result<(bool, String)> {
    let configs = [
        CheckDims::new(1, 2, 1, 1, 1, 1),
        CheckDims::new(2, 2, 1, 1, 1, 1),
        CheckDims::new(3, 4, 2, 2, 2, 2),
        CheckDims::new(5, 4, 2, 6, 3, 2),
        CheckDims::new(2, 12, 6, 6, 3, 3),
    ];
    let mut worst = 0.0f64;
    for (seed, dims) in configs.into_iter().enumerate() {
        let report = grad_check(seed as u64 + 1, dims, 1e-5, 1e-6)?;
        worst = worst.max(report.worst());
    }
    Ok((worst < 1e-6, format!("max relative error {worst:.3e}")))
}

fn attention_rows() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut positive = true;
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..8);
        let scale = [1.0, 1e2, 1e4][seed as usize % 3];
        let logits = Tensor::<f32>::uniform([n, n], -scale, scale, &mut r);
        let a = row_softmax(&logits)?;
        for row in a.data().chunks(n) {
            worst = worst.max((row.iter().sum::<f32>() as f64 - 1.0).abs());
            positive &= row.iter().all(|&p| p > 0.0 && p <= 1.0);
        }
    }
    Ok((worst < 1e-6 && positive, format!("max |row sum - 1| {worst:.3e}")))
}

fn equivariance() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let n = r.random_range(2..7);
        let p = init_params::<f32>(BlockDims::new(4, 2, 3)?, seed);
        let x = Tensor::<f32>::uniform([n, 4, 2, 3], -1.0, 1.0, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let base = nlroi_forward(&x, &p)?;
        let moved = nlroi_forward(&x.permute_rois(&perm)?, &p)?;
        worst = worst.max(moved.augmented.max_rel_diff(&base.augmented.permute_rois(&perm)?)?);
        let pap = Tensor::from_fn([n, n], |k| base.attention.at(&[perm[k / n], perm[k % n]]));
        worst = worst.max(moved.attention.max_rel_diff(&pap)?);
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.3e}")))
}

fn commutation() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (n, h, w) = (r.random_range(1..6), r.random_range(1..4), r.random_range(1..4));
        let p = init_params::<f32>(BlockDims::new(5, 3, 2)?, seed);
        let x = Tensor::<f32>::uniform([n, 5, h, w], -1.0, 1.0, &mut r);
        let a = correlation(&x, &p)?;
        let pooled_then_mixed = attention_mix(&a, &g_transform(&x, &p)?)?;
        let maps = g_feature_map(&x, &p)?;
        let mixed = matmul(&a, &flatten_rois(&maps)?)?.reshape(maps.shape())?;
        worst = worst.max(global_avg_pool(&mixed)?.max_rel_diff(&pooled_then_mixed)?);
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.3e}")))
}

fn identity_preservation() -> Result<(bool, String)> {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let p = init_params::<f32>(BlockDims::new(6, 3, 3)?, seed);
        let x = Tensor::<f32>::uniform([r.random_range(1..6), 6, 2, 2], -3.0, 3.0, &mut r);
        if !nlroi_forward(&x, &p)?.augmented.slice_channels(0, 6)?.bit_eq(&x) {
            return Ok((false, format!("seed {seed}: input channels altered")));
        }
    }
    Ok((true, "20 instances".into()))
}

fn center_tap() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (di, dout) = (r.random_range(1..5), r.random_range(1..5));
        let x = Tensor::<f32>::uniform([2, di, 3, 2], -1.0, 1.0, &mut r);
        let w = Tensor::<f32>::uniform([dout, di], -1.0, 1.0, &mut r);
        let b = Tensor::<f32>::uniform([dout], -1.0, 1.0, &mut r);
        let w3 = Tensor::from_fn([dout, di, 3, 3], |k| if k % 9 == 4 { w.data()[k / 9] } else { 0.0 });
        let lhs = conv1x1(&x, &w, Some(&b))?;
        worst = worst.max(lhs.max_rel_diff(&conv3x3(&x, &w3, Some(&b))?)?);
    }
    Ok((worst < 1e-6, format!("max relative error {worst:.3e}")))
}

fn self_attention_form() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (n, d) = (r.random_range(1..7), r.random_range(1..6));
        let p = init_params::<f64>(BlockDims::new(d, d, 1)?, seed);
        let x = Tensor::<f64>::uniform([n, d, 1, 1], -2.0, 2.0, &mut r);
        // Columns of `cols` are the RoI vectors x_i.
        let cols = x.reshape([n, d])?.transpose()?;
        let m = matmul(&p.w_phi().transpose()?, p.w_psi())?;
        let logits = matmul(&matmul(&cols.transpose()?, &m)?, &cols)?;
        worst = worst.max(correlation(&x, &p)?.max_rel_diff(&row_softmax(&logits)?)?);
    }
    Ok((worst < 1e-6, format!("max relative error {worst:.3e}")))
}

fn traced_forward() -> Result<(bool, String)> {
    for (seed, n) in [(1u64, 1usize), (2, 5)] {
        let p = init_params::<f32>(BlockDims::new(4, 2, 2)?, seed);
        let x = Tensor::<f32>::uniform([n, 4, 3, 3], -1.0, 1.0, &mut rng(seed));
        let (out, trace) = forward_traced(&x, &p)?;
        let plain = nlroi_forward(&x, &p)?;
        if !out.augmented.bit_eq(&plain.augmented) || !trace.replay_attention()?.bit_eq(&plain.attention) {
            return Ok((false, format!("N={n}: traced output differs")));
        }
    }
    Ok((true, "N in {1, 5}".into()))
}

fn concurrency() -> Result<(bool, String)> {
    let p = init_params::<f32>(BlockDims::new(8, 4, 4)?, 3);
    let x = Tensor::<f32>::uniform([16, 8, 4, 4], -1.0, 1.0, &mut rng(3));
    let reference = nlroi_forward(&x, &p)?;
    let same = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| nlroi_forward(&x, &p))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("forward worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .iter()
    .all(|o| o.augmented.bit_eq(&reference.augmented));
    Ok((same, "4 threads".into()))
}

fn blob_roundtrip() -> Result<(bool, String)> {
    for seed in 0..40u64 {
        let mut r = rng(seed);
        let rank = r.random_range(1..5);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..5)).collect();
        let t: AnyTensor = if seed % 2 == 0 {
            Tensor::<f32>::uniform(shape, -1e3, 1e3, &mut r).into()
        } else {
            Tensor::<f64>::uniform(shape, -1e3, 1e3, &mut r).into()
        };
        let bytes = match &t {
            AnyTensor::F32(t) => encode_blob(t),
            AnyTensor::F64(t) => encode_blob(t),
        };
        if !decode_blob(&bytes)?.bit_eq(&t) {
            return Ok((false, format!("seed {seed}: round-trip changed the tensor")));
        }
    }
    Ok((true, "40 tensors".into()))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for outcome in super::run() {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
