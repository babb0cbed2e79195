//! The non-local RoI block.
//!
//! Given a stack of `N` RoI feature blobs `X` of shape `(N, D, H, W)`, the
//! block computes an `N x N` attention matrix between RoIs from two 1x1
//! embeddings, mixes a pooled per-RoI summary `g(x_j)` with it, and appends
//! the mixed summary to every RoI as `D_g` extra channels:
//!
//! ```text
//! A     = softmax_rows( flat(phi(X)) . flat(psi(X))^T )          (N, N)
//! G     = avgpool( conv3x3( relu( conv1x1(X) ) ) )                (N, D_g)
//! Y     = A . G                                                   (N, D_g)
//! out   = concat_channels(X, tile(Y, H, W))                       (N, D + D_g, H, W)
//! ```
//!
//! Nothing in the block depends on `N`, so any number of RoIs can be fed to
//! the same parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv1x1, conv3x3, dims4, flatten_rois, global_avg_pool, matmul, relu,
    row_softmax, tile_spatial, Real, Tensor,
};

/// Names of the learnable tensors, in canonical order.
pub const PARAM_NAMES: [&str; 6] = ["w_phi", "w_psi", "g1_w", "g1_b", "g2_w", "g2_b"];

/// Channel widths of a block: input `d`, embedding `d_f`, non-local feature `d_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockDims {
    pub d: usize,
    pub d_f: usize,
    pub d_g: usize,
}

impl BlockDims {
    pub fn new(d: usize, d_f: usize, d_g: usize) -> Result<Self> {
        if d == 0 || d_f == 0 || d_g == 0 {
            return Err(Error::invalid(
                "block dims",
                format!("all widths must be positive, got D={d} D_f={d_f} D_g={d_g}"),
            ));
        }
        Ok(Self { d, d_f, d_g })
    }

    /// Default bottleneck: both `d_f` and `d_g` are half of `d`, rounded up.
    pub fn bottleneck(d: usize) -> Result<Self> {
        let half = d.div_ceil(2);
        Self::new(d, half, half)
    }

    pub fn out_channels(&self) -> usize {
        self.d + self.d_g
    }

    fn shapes(&self) -> [Vec<usize>; 6] {
        let Self { d, d_f, d_g } = *self;
        [
            vec![d_f, d],
            vec![d_f, d],
            vec![d_g, d],
            vec![d_g],
            vec![d_g, d_g, 3, 3],
            vec![d_g],
        ]
    }
}

/// Learnable weights of one block. Shapes are validated on construction and
/// the tensors are never mutated afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct NlRoiParams<T> {
    w_phi: Tensor<T>,
    w_psi: Tensor<T>,
    g1_w: Tensor<T>,
    g1_b: Tensor<T>,
    g2_w: Tensor<T>,
    g2_b: Tensor<T>,
    dims: BlockDims,
}

impl<T: Real> NlRoiParams<T> {
    /// Assembles parameters, inferring the widths from `w_phi` and `g1_w`.
    pub fn new(
        w_phi: Tensor<T>,
        w_psi: Tensor<T>,
        g1_w: Tensor<T>,
        g1_b: Tensor<T>,
        g2_w: Tensor<T>,
        g2_b: Tensor<T>,
    ) -> Result<Self> {
        let (d_f, d) = match *w_phi.shape() {
            [d_f, d] => (d_f, d),
            _ => return Err(Error::invalid("params", format!("w_phi must be 2-D, got {:?}", w_phi.shape()))),
        };
        let d_g = g1_w.shape()[0];
        let dims = BlockDims::new(d, d_f, d_g)?;
        Self::from_tensors(dims, [w_phi, w_psi, g1_w, g1_b, g2_w, g2_b])
    }

    /// Builds parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(dims: BlockDims, tensors: [Tensor<T>; 6]) -> Result<Self> {
        for ((name, expected), t) in PARAM_NAMES.iter().zip(dims.shapes()).zip(&tensors) {
            if t.shape() != expected.as_slice() {
                return Err(Error::invalid(
                    "params",
                    format!("{name} has shape {:?}, expected {expected:?}", t.shape()),
                ));
            }
        }
        let [w_phi, w_psi, g1_w, g1_b, g2_w, g2_b] = tensors;
        Ok(Self {
            w_phi,
            w_psi,
            g1_w,
            g1_b,
            g2_w,
            g2_b,
            dims,
        })
    }

    /// All-zero tensors of the right shapes; used as a gradient accumulator.
    pub fn zeros(dims: BlockDims) -> Self {
        let tensors = dims.shapes().map(Tensor::zeros);
        Self::from_tensors(dims, tensors).expect("shapes derived from dims")
    }

    pub fn dims(&self) -> BlockDims {
        self.dims
    }

    pub fn w_phi(&self) -> &Tensor<T> {
        &self.w_phi
    }

    pub fn w_psi(&self) -> &Tensor<T> {
        &self.w_psi
    }

    pub fn g1_w(&self) -> &Tensor<T> {
        &self.g1_w
    }

    pub fn g1_b(&self) -> &Tensor<T> {
        &self.g1_b
    }

    pub fn g2_w(&self) -> &Tensor<T> {
        &self.g2_w
    }

    pub fn g2_b(&self) -> &Tensor<T> {
        &self.g2_b
    }

    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [&self.w_phi, &self.w_psi, &self.g1_w, &self.g1_b, &self.g2_w, &self.g2_b]
    }

    pub fn into_tensors(self) -> [Tensor<T>; 6] {
        [self.w_phi, self.w_psi, self.g1_w, self.g1_b, self.g2_w, self.g2_b]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Copy with the tensor called `name` replaced.
    pub fn with(&self, name: &str, tensor: Tensor<T>) -> Result<Self> {
        let idx = PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter {name:?}")))?;
        let mut tensors = self.clone().into_tensors();
        tensors[idx] = tensor;
        Self::from_tensors(self.dims, tensors)
    }

    pub fn cast<U: Real>(&self) -> NlRoiParams<U> {
        let tensors = self.tensors().map(|t| t.cast());
        NlRoiParams::from_tensors(self.dims, tensors).expect("cast preserves shapes")
    }

    fn check_input(&self, op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = dims4(op, x)?;
        if dims[0] == 0 {
            return Err(Error::invalid(op, "at least one RoI is required"));
        }
        if dims[1] != self.dims.d {
            return Err(Error::invalid(
                op,
                format!(
                    "input has {} channels but params expect D={}",
                    dims[1], self.dims.d
                ),
            ));
        }
        Ok(dims)
    }
}

/// Draws weights from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` with a
/// ChaCha8 stream seeded by `seed`; biases are zero. Sampling happens in
/// binary64, so the f32 and f64 parameters for one seed agree up to rounding.
pub fn init_params<T: Real>(dims: BlockDims, seed: u64) -> NlRoiParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: Vec<usize>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::uniform(shape, -bound, bound, &mut rng)
    };
    let BlockDims { d, d_f, d_g } = dims;
    let w_phi = draw(vec![d_f, d], d);
    let w_psi = draw(vec![d_f, d], d);
    let g1_w = draw(vec![d_g, d], d);
    let g2_w = draw(vec![d_g, d_g, 3, 3], d_g * 9);
    NlRoiParams::from_tensors(
        dims,
        [w_phi, w_psi, g1_w, Tensor::zeros([d_g]), g2_w, Tensor::zeros([d_g])],
    )
    .expect("shapes derived from dims")
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NlRoiOutput<T> {
    /// `(N, D + D_g, H, W)`: the input followed by the tiled non-local summary.
    pub augmented: Tensor<T>,
    /// `(N, N)` row-stochastic attention between RoIs.
    pub attention: Tensor<T>,
    /// `(N, D_g)` attention-mixed summary `y_i` for each RoI.
    pub pooled_nl: Tensor<T>,
}

/// Pre-softmax correlation logits `flat(phi(X)) . flat(psi(X))^T`.
pub fn correlation_logits<T: Real>(x: &Tensor<T>, params: &NlRoiParams<T>) -> Result<Tensor<T>> {
    params.check_input("correlation", x)?;
    let phi = flatten_rois(&conv1x1(x, &params.w_phi, None)?)?;
    let psi = flatten_rois(&conv1x1(x, &params.w_psi, None)?)?;
    matmul(&phi, &psi.transpose()?)
}

/// Row-normalized embedded-Gaussian correlation between every pair of RoIs.
pub fn correlation<T: Real>(x: &Tensor<T>, params: &NlRoiParams<T>) -> Result<Tensor<T>> {
    row_softmax(&correlation_logits(x, params)?)
}

/// `conv3x3(relu(conv1x1(x)))`: the non-local feature maps before pooling,
/// shape `(N, D_g, H, W)`.
pub fn g_feature_map<T: Real>(x: &Tensor<T>, params: &NlRoiParams<T>) -> Result<Tensor<T>> {
    params.check_input("g_transform", x)?;
    let reduced = conv1x1(x, &params.g1_w, Some(&params.g1_b))?;
    conv3x3(&relu(&reduced), &params.g2_w, Some(&params.g2_b))
}

/// Pooled per-RoI non-local features, shape `(N, D_g)`.
pub fn g_transform<T: Real>(x: &Tensor<T>, params: &NlRoiParams<T>) -> Result<Tensor<T>> {
    global_avg_pool(&g_feature_map(x, params)?)
}

/// `y_i = sum_j A[i, j] g_j`, including `j = i`.
pub fn attention_mix<T: Real>(attention: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    match (attention.shape(), g.shape()) {
        ([n, m], [ng, _]) if n == m && m == ng => matmul(attention, g),
        _ => Err(Error::shape("attention_mix", attention.shape(), g.shape())),
    }
}

pub fn nlroi_forward<T: Real>(x: &Tensor<T>, params: &NlRoiParams<T>) -> Result<NlRoiOutput<T>> {
    let [_, _, h, w] = params.check_input("nlroi_forward", x)?;
    let attention = correlation(x, params)?;
    let pooled_nl = attention_mix(&attention, &g_transform(x, params)?)?;
    let augmented = concat_channels(x, &tile_spatial(&pooled_nl, h, w)?)?;
    Ok(NlRoiOutput {
        augmented,
        attention,
        pooled_nl,
    })
}
