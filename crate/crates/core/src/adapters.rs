//! Heterogeneous bottleneck adapters.
//!
//! The visual adapter treats the patch tokens as a `grid_side x grid_side`
//! image: a 1x1 conv compresses `D -> D/r`, a 3x3 depthwise conv mixes each
//! compressed channel over its spatial neighbourhood, GELU, then a 1x1 conv
//! expands back to `D`. The text adapter is the same bottleneck as dense
//! per-token projections, with no cross-token mixing.
//!
//! Adapter outputs enter a frozen block through [`adapted_residual`], scaled
//! by a factor drawn from a [`ScaleSchedule`].

use serde::{Deserialize, Serialize};

use crate::error::{HebaError, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

pub const KERNEL_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Kaiming,
    Zero,
}

/// Structural variants of the adapter stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Conv visual adapters, Kaiming-initialized up-projections.
    Full,
    /// As `Full` but every up-projection starts at zero.
    ZeroInit,
    /// Visual stream uses a per-token linear bottleneck; no 2-d reshape.
    NoSpatial1d,
    /// Depthwise kernels fixed at identity and not trained.
    NoDwconv,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::ZeroInit,
        Variant::NoSpatial1d,
        Variant::NoDwconv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ZeroInit => "zero_init",
            Variant::NoSpatial1d => "no_spatial_1d",
            Variant::NoDwconv => "no_dwconv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn init_mode(self, configured: InitMode) -> InitMode {
        match self {
            Variant::ZeroInit => InitMode::Zero,
            _ => configured,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub embed_dim: usize,
    pub reduction: usize,
    pub kernel: usize,
    /// Residual scale during training and base-class evaluation.
    pub alpha_base: f64,
    /// Residual scale for novel-class evaluation.
    pub alpha_novel: f64,
    /// Amplification applied on "fast" steps.
    pub fast_multiplier: f64,
    /// Probability that a training step is a fast step.
    pub fast_prob: f64,
    pub init_mode: InitMode,
    pub grid_side: usize,
    /// Blocks that receive adapters; `None` means every block.
    pub adapter_blocks: Option<Vec<usize>>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            embed_dim: 32,
            reduction: 4,
            kernel: KERNEL_SIZE,
            alpha_base: 0.025,
            alpha_novel: 0.010,
            fast_multiplier: 2.25,
            fast_prob: 0.8,
            init_mode: InitMode::Kaiming,
            grid_side: 7,
            adapter_blocks: None,
        }
    }
}

impl AdapterConfig {
    /// The cross-dataset preset: stronger base scale, larger multiplier.
    pub fn cross_dataset() -> Self {
        AdapterConfig {
            alpha_base: 0.05,
            alpha_novel: 0.025,
            fast_multiplier: 10.0,
            ..Self::default()
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HebaError::InvalidConfig(m));
        if self.embed_dim == 0 || self.reduction == 0 || self.grid_side == 0 {
            return bad("embed_dim, reduction and grid_side must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.reduction) {
            return bad(format!(
                "embed_dim {} not divisible by reduction {}",
                self.embed_dim, self.reduction
            ));
        }
        if self.kernel != KERNEL_SIZE {
            return bad(format!("kernel must be {KERNEL_SIZE}, got {}", self.kernel));
        }
        if !(self.alpha_base >= 0.0 && self.alpha_novel >= 0.0) {
            return bad("adapter scales must be >= 0".into());
        }
        if !(self.fast_multiplier >= 1.0) {
            return bad(format!("fast_multiplier {} < 1", self.fast_multiplier));
        }
        if !(0.0..=1.0).contains(&self.fast_prob) {
            return bad(format!("fast_prob {} outside [0, 1]", self.fast_prob));
        }
        Ok(())
    }
}

/// He-normal weights: i.i.d. `N(0, 2 / n_in)`.
pub fn kaiming_init<T: Scalar>(n_in: usize, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    assert!(n_in >= 1, "kaiming_init needs n_in >= 1");
    Tensor::randn(shape, (2.0 / n_in as f64).sqrt(), rng)
}

fn up_projection<T: Scalar>(mode: InitMode, dim: usize, hidden: usize, rng: &mut Rng) -> Tensor<T> {
    match mode {
        InitMode::Kaiming => kaiming_init(hidden, &[dim, hidden], rng),
        InitMode::Zero => Tensor::zeros(&[dim, hidden]),
    }
}

/// Identity 3x3 kernels (centre tap 1) for `channels` channels.
pub fn identity_kernels<T: Scalar>(channels: usize) -> Tensor<T> {
    let mut k = Tensor::zeros(&[channels, KERNEL_SIZE, KERNEL_SIZE]);
    for c in 0..channels {
        k.data_mut()[c * 9 + 4] = T::one();
    }
    k
}

/// Named, trainable parameter tensors of a module.
pub trait Parameters<T: Scalar> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;

    /// Exact count of scalars in `params()`.
    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualAdapter<T> {
    /// `[D/r, D]`
    pub w_down: Tensor<T>,
    /// `[D/r, 3, 3]`
    pub k_dw: Tensor<T>,
    /// `[D, D/r]`
    pub w_up: Tensor<T>,
    /// `[D]`
    pub b_up: Tensor<T>,
}

impl<T: Scalar> VisualAdapter<T> {
    pub fn new(cfg: &AdapterConfig, mode: InitMode, rng: &mut Rng) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim());
        VisualAdapter {
            w_down: kaiming_init(d, &[h, d], rng),
            k_dw: kaiming_init(
                KERNEL_SIZE * KERNEL_SIZE,
                &[h, KERNEL_SIZE, KERNEL_SIZE],
                rng,
            ),
            w_up: up_projection(mode, d, h, rng),
            b_up: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, train_kernel: bool) -> BoundVisual {
        BoundVisual {
            w_down: g.param(self.w_down.clone()),
            k_dw: if train_kernel {
                g.param(self.k_dw.clone())
            } else {
                g.constant(self.k_dw.clone())
            },
            w_up: g.param(self.w_up.clone()),
            b_up: g.param(self.b_up.clone()),
        }
    }
}

impl<T: Scalar> Parameters<T> for VisualAdapter<T> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_down", &self.w_down),
            ("k_dw", &self.k_dw),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_down", &mut self.w_down),
            ("k_dw", &mut self.k_dw),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextAdapter<T> {
    /// `[D/r, D]`
    pub w_down: Tensor<T>,
    /// `[D/r]`
    pub b_down: Tensor<T>,
    /// `[D, D/r]`
    pub w_up: Tensor<T>,
    /// `[D]`
    pub b_up: Tensor<T>,
}

impl<T: Scalar> TextAdapter<T> {
    pub fn new(cfg: &AdapterConfig, mode: InitMode, rng: &mut Rng) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim());
        TextAdapter {
            w_down: kaiming_init(d, &[h, d], rng),
            b_down: Tensor::zeros(&[h]),
            w_up: up_projection(mode, d, h, rng),
            b_up: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundText {
        BoundText {
            w_down: g.param(self.w_down.clone()),
            b_down: g.param(self.b_down.clone()),
            w_up: g.param(self.w_up.clone()),
            b_up: g.param(self.b_up.clone()),
        }
    }
}

impl<T: Scalar> Parameters<T> for TextAdapter<T> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
        ]
    }
}

/// Graph handles for one visual adapter's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundVisual {
    pub w_down: Var,
    pub k_dw: Var,
    pub w_up: Var,
    pub b_up: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundText {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// `[B, N, D] -> [B, D, side, side]`, token `n` landing at row `n / side`,
/// column `n % side`.
pub fn tokens_to_grid<T: Scalar>(g: &mut Graph<T>, x: Var, grid_side: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(HebaError::InvalidShape {
            op: "tokens_to_grid",
            detail: format!("expected [B,N,D], got {s:?}"),
        });
    }
    if s[1] != grid_side * grid_side {
        return Err(HebaError::NotAGrid {
            tokens: s[1],
            grid_side,
        });
    }
    g.note_grid_reshape();
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], grid_side, grid_side])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(HebaError::InvalidShape {
            op: "grid_to_tokens",
            detail: format!("expected [B,D,S,S], got {s:?}"),
        });
    }
    let t = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(t, &[0, 2, 1])
}

pub fn visual_adapter_forward<T: Scalar>(
    g: &mut Graph<T>,
    a: &BoundVisual,
    x: Var,
    cfg: &AdapterConfig,
) -> Result<Var> {
    let grid = tokens_to_grid(g, x, cfg.grid_side)?;
    let down = g.conv2d_pointwise(grid, a.w_down)?;
    let mid = g.conv2d_depthwise(down, a.k_dw)?;
    let act = g.gelu(mid);
    let up = g.conv2d_pointwise(act, a.w_up)?;
    let tokens = grid_to_tokens(g, up)?;
    g.add_broadcast(tokens, a.b_up)
}

pub fn text_adapter_forward<T: Scalar>(g: &mut Graph<T>, a: &BoundText, x: Var) -> Result<Var> {
    let h = g.linear(x, a.w_down, Some(a.b_down))?;
    let h = g.gelu(h);
    g.linear(h, a.w_up, Some(a.b_up))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Train,
    Eval,
}

/// Slow-fast residual scale: on a training step the scale is
/// `base_scale * fast_multiplier` with probability `fast_prob`, otherwise
/// `base_scale`. In eval mode it is always `base_scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleSchedule {
    pub base_scale: f64,
    pub fast_multiplier: f64,
    pub fast_prob: f64,
    pub mode: ScaleMode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleDraw {
    pub scale: f64,
    /// Whether this draw was amplified.
    pub fast: bool,
}

impl ScaleSchedule {
    pub fn train(cfg: &AdapterConfig) -> Self {
        ScaleSchedule {
            base_scale: cfg.alpha_base,
            fast_multiplier: cfg.fast_multiplier,
            fast_prob: cfg.fast_prob,
            mode: ScaleMode::Train,
        }
    }

    pub fn eval(base_scale: f64) -> Self {
        ScaleSchedule {
            base_scale,
            fast_multiplier: 1.0,
            fast_prob: 0.0,
            mode: ScaleMode::Eval,
        }
    }

    /// Expected scale under the sampling distribution.
    pub fn expected(&self) -> f64 {
        match self.mode {
            ScaleMode::Eval => self.base_scale,
            ScaleMode::Train => {
                self.base_scale * (1.0 + self.fast_prob * (self.fast_multiplier - 1.0))
            }
        }
    }

    /// Eval mode consumes no randomness.
    pub fn sample_scale(&self, rng: &mut Rng) -> ScaleDraw {
        match self.mode {
            ScaleMode::Eval => ScaleDraw {
                scale: self.base_scale,
                fast: false,
            },
            ScaleMode::Train => {
                let fast = rng.uniform() < self.fast_prob;
                let scale = if fast {
                    self.base_scale * self.fast_multiplier
                } else {
                    self.base_scale
                };
                ScaleDraw { scale, fast }
            }
        }
    }
}

/// `x + branch_out + scale * adapter_out`, the pre-normalization sum.
/// With no adapter this is the frozen block's own `x + branch_out`.
pub fn adapted_sum<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    branch_out: Var,
    adapter_out: Option<Var>,
    scale: T,
) -> Result<Var> {
    let base = g.add(x, branch_out)?;
    match adapter_out {
        None => Ok(base),
        Some(a) => {
            if g.shape(a) != g.shape(x) {
                return Err(HebaError::ShapeMismatch {
                    op: "adapted_residual",
                    lhs: g.shape(x).to_vec(),
                    rhs: g.shape(a).to_vec(),
                });
            }
            let scaled = g.scale(a, scale);
            g.add(base, scaled)
        }
    }
}

/// Frozen block normalization applied to the adapted sum.
pub fn adapted_residual<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    branch_out: Var,
    adapter_out: Option<Var>,
    scale: T,
    ln: (Var, Var),
    eps: f64,
) -> Result<Var> {
    let s = adapted_sum(g, x, branch_out, adapter_out, scale)?;
    g.layer_norm(s, ln.0, ln.1, eps)
}

/// Trainable scalar count of a dense two-layer bottleneck `D -> hidden -> D`
/// with biases on both projections.
pub fn linear_adapter_param_count(dim: usize, hidden: usize) -> usize {
    dim * hidden + hidden + hidden * dim + dim
}

/// Hidden-layer weight count `2 * D * hidden` of a `D -> hidden -> D` adapter.
pub fn hidden_weight_count(dim: usize, hidden: usize) -> u64 {
    2 * dim as u64 * hidden as u64
}

/// Weight counts of an inverse-bottleneck (`D -> 4D`) and a bottleneck
/// (`D -> D/4`) adapter of the same width.
pub fn expansion_vs_bottleneck(dim: usize) -> (u64, u64) {
    (
        hidden_weight_count(dim, 4 * dim),
        hidden_weight_count(dim, dim / 4),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, r: usize, side: usize) -> AdapterConfig {
        AdapterConfig {
            embed_dim: d,
            reduction: r,
            grid_side: side,
            ..AdapterConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(AdapterConfig::default().validate().is_ok());
        assert!(cfg(30, 4, 7).validate().is_err());
        let mut c = AdapterConfig::default();
        c.fast_prob = 1.5;
        assert!(c.validate().is_err());
        c = AdapterConfig::default();
        c.fast_multiplier = 0.5;
        assert!(c.validate().is_err());
        c = AdapterConfig::default();
        c.kernel = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kaiming_target_variance() {
        // D = 32, r = 4 -> n_in = 8 -> 2/8
        let mut rng = Rng::new(1);
        let t: Tensor<f64> = kaiming_init(8, &[100_000], &mut rng);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / 0.25 - 1.0).abs() < 0.1, "{var}");
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn zero_init_up_projection() {
        let mut rng = Rng::new(1);
        let c = AdapterConfig::default();
        let v = VisualAdapter::<f64>::new(&c, InitMode::Zero, &mut rng);
        let t = TextAdapter::<f64>::new(&c, InitMode::Zero, &mut rng);
        assert!(v.w_up.data().iter().all(|&x| x == 0.0));
        assert!(t.w_up.data().iter().all(|&x| x == 0.0));
        assert!(v.b_up.data().iter().all(|&x| x == 0.0));
        assert!(t.b_down.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grid_layout_is_row_major() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let grid = tokens_to_grid(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(grid), &[1, 1, 2, 2]);
        let v = g.value(grid);
        assert_eq!(v.at(&[0, 0, 0, 0]), 1.0);
        assert_eq!(v.at(&[0, 0, 0, 1]), 2.0);
        assert_eq!(v.at(&[0, 0, 1, 0]), 3.0);
        assert_eq!(v.at(&[0, 0, 1, 1]), 4.0);
        assert_eq!(g.grid_reshapes(), 1);
    }

    #[test]
    fn grid_roundtrip_bitwise() {
        let mut rng = Rng::new(3);
        let mut g = Graph::<f64>::new();
        let xv = Tensor::<f64>::randn(&[2, 9, 5], 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let grid = tokens_to_grid(&mut g, x, 3).unwrap();
        let back = grid_to_tokens(&mut g, grid).unwrap();
        assert!(g.value(back).bitwise_eq(&xv));
    }

    #[test]
    fn non_square_token_count_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 5, 2]));
        assert!(matches!(
            tokens_to_grid(&mut g, x, 2),
            Err(HebaError::NotAGrid {
                tokens: 5,
                grid_side: 2
            })
        ));
    }

    #[test]
    fn text_adapter_hand_example() {
        // D=2, r=2: w_down=[[1,0]], w_up=[[1],[0]]
        let a = TextAdapter::<f64> {
            w_down: Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap(),
            b_down: Tensor::zeros(&[1]),
            w_up: Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap(),
            b_up: Tensor::zeros(&[2]),
        };
        let mut g = Graph::<f64>::new();
        let b = a.bind(&mut g);
        let x = g.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 5.0]).unwrap());
        let y = text_adapter_forward(&mut g, &b, x).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.841345).abs() < 1e-6);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn zero_up_projection_gives_zero_output() {
        let mut rng = Rng::new(5);
        let c = cfg(8, 4, 3);
        let v = VisualAdapter::<f64>::new(&c, InitMode::Zero, &mut rng);
        let t = TextAdapter::<f64>::new(&c, InitMode::Zero, &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[2, 9, 8], 1.0, &mut rng));
        let bv = v.bind(&mut g, true);
        let bt = t.bind(&mut g);
        let yv = visual_adapter_forward(&mut g, &bv, x, &c).unwrap();
        let yt = text_adapter_forward(&mut g, &bt, x).unwrap();
        assert!(g.value(yv).data().iter().all(|&v| v == 0.0));
        assert!(g.value(yt).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_counts() {
        let mut rng = Rng::new(1);
        let c = cfg(32, 4, 7);
        let t = TextAdapter::<f64>::new(&c, InitMode::Kaiming, &mut rng);
        let v = VisualAdapter::<f64>::new(&c, InitMode::Kaiming, &mut rng);
        assert_eq!(t.param_count(), 552);
        assert_eq!(v.param_count(), 616);
        assert_eq!(linear_adapter_param_count(32, 8), 552);
        let (inv, bot) = expansion_vs_bottleneck(32);
        assert_eq!(inv, 16 * bot);
    }

    #[test]
    fn scale_degenerate_probabilities() {
        let mut rng = Rng::new(1);
        let mut s = ScaleSchedule {
            base_scale: 0.025,
            fast_multiplier: 2.25,
            fast_prob: 0.0,
            mode: ScaleMode::Train,
        };
        for _ in 0..1000 {
            assert_eq!(s.sample_scale(&mut rng).scale, 0.025);
        }
        s.fast_prob = 1.0;
        for _ in 0..1000 {
            let d = s.sample_scale(&mut rng);
            assert!(d.fast);
            assert_eq!(d.scale, 0.025 * 2.25);
        }
        let e = ScaleSchedule::eval(0.01);
        assert_eq!(e.sample_scale(&mut rng).scale, 0.01);
    }

    #[test]
    fn adapted_residual_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2]));
        let a = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(adapted_sum(&mut g, x, x, Some(a), 0.5).is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()), Some(v));
        }
        assert_eq!(Variant::parse("nope"), None);
    }
}
