//! Image encoder, the two attention-point encoders, heatmap generation and
//! the heatmap-gated image decoder.
//!
//! Attention points are `(x, y)` in `[0, 1]^2`, `x` rightward along columns
//! and `y` downward along rows, laid out `[x1, y1, x2, y2, ...]`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};

pub const POINTS_PER_ENCODER: usize = 3;
pub const POINTS: usize = 2 * POINTS_PER_ENCODER;

#[derive(Clone, Debug)]
pub struct Vision {
    encoder: Vec<Conv>,
    point_a: Vec<Conv>,
    point_b: Vec<Conv>,
    decoder: Vec<Conv>,
    /// Learned inverse temperature, when enabled.
    inv_temperature: Option<ParamId>,
    temperature: f32,
    slope: f32,
    sigma: f32,
    pub image_size: usize,
    pub feature_size: usize,
}

fn stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    channels: &[usize],
    k: usize,
    transposed: bool,
) -> Result<Vec<Conv>> {
    channels
        .windows(2)
        .enumerate()
        .map(|(i, w)| Conv::new(store, rng, &format!("{name}.{i}"), ParamGroup::Vision, w[0], w[1], k, transposed))
        .collect()
}

/// `[n, 1]` pixel coordinates `i / (n - 1)`.
pub fn coordinate_line<T: Real>(n: usize) -> Tensor<T> {
    let nm1 = T::from_usize(n - 1).unwrap();
    Tensor::new(&[n, 1], (0..n).map(|i| T::from_usize(i).unwrap() / nm1).collect()).expect("line shape")
}

impl Vision {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let k = cfg.kernel;
        let enc: Vec<usize> = std::iter::once(3).chain(cfg.encoder_channels.iter().copied()).collect();
        let pts: Vec<usize> = std::iter::once(3).chain(cfg.point_channels.iter().copied()).collect();
        let dec: Vec<usize> =
            std::iter::once(POINTS).chain(cfg.decoder_channels.iter().copied()).chain(std::iter::once(3)).collect();
        let encoder = stack(store, rng, "vision.encoder", &enc, k, false)?;
        let point_a = stack(store, rng, "vision.points_a", &pts, k, false)?;
        let point_b = stack(store, rng, "vision.points_b", &pts, k, false)?;
        let decoder = stack(store, rng, "vision.decoder", &dec, k, true)?;
        let inv_temperature = if cfg.learn_temperature {
            Some(store.add("vision.inv_temperature", ParamGroup::Vision, Tensor::full(&[1], 1.0 / cfg.softmax_temperature))?)
        } else {
            None
        };
        Ok(Self {
            encoder,
            point_a,
            point_b,
            decoder,
            inv_temperature,
            temperature: cfg.softmax_temperature,
            slope: cfg.leaky_slope,
            sigma: cfg.heatmap_sigma,
            image_size: cfg.image_size,
            feature_size: cfg.image_size - 3 * (k - 1),
        })
    }

    fn check_image<T: Real>(&self, g: &Graph<'_, T>, x: Var, op: &'static str) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::shape(op, format!("expected [N, 3, {0}, {0}], got {s:?}", self.image_size)));
        }
        Ok(s[0])
    }

    fn convs<T: Real>(&self, g: &mut Graph<'_, T>, layers: &[Conv], mut x: Var, activate_last: bool) -> Result<Var> {
        let slope = T::from_f64_lossy(self.slope as f64);
        for (i, c) in layers.iter().enumerate() {
            x = c.forward(g, x)?;
            if i + 1 < layers.len() || activate_last {
                x = g.leaky_relu(x, slope);
            }
        }
        Ok(x)
    }

    /// `[N, 3, H, W]` images to the `[N, 6, F, F]` feature map.
    pub fn encode_image<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Var> {
        self.check_image(g, images, "encode_image")?;
        self.convs(g, &self.encoder, images, true)
    }

    /// Expected grid coordinate under a per-channel softmax of `[N, C, F, F]`
    /// activations; returns `[N, 2C]`.
    pub fn spatial_softmax<T: Real>(&self, g: &mut Graph<'_, T>, act: Var) -> Result<Var> {
        let s = g.shape(act).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("spatial_softmax", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let scaled = match self.inv_temperature {
            Some(p) => {
                let col = g.reshape(act, &[n * c * h * w, 1])?;
                let beta = g.param(p);
                let m = g.mul_row(col, beta)?;
                g.reshape(m, &[n * c, h * w])?
            }
            None => {
                let flat = g.reshape(act, &[n * c, h * w])?;
                g.scale(flat, T::from_f64_lossy(1.0 / self.temperature as f64))
            }
        };
        let weights = g.softmax(scaled);
        let ones_w = g.constant(Tensor::new(&[w, 1], vec![T::one(); w])?);
        let ones_h = g.constant(Tensor::new(&[h, 1], vec![T::one(); h])?);
        let xs = g.constant(coordinate_line(w));
        let ys = g.constant(coordinate_line(h));
        // Each marginal is one short sequential sum, so x and y of a
        // symmetric map come out bitwise equal.
        let weights = g.reshape(weights, &[n * c, h, w])?;
        let rows = g.reshape(weights, &[n * c * h, w])?;
        let row_sums = g.matmul(rows, ones_w)?;
        let row_marginal = g.reshape(row_sums, &[n * c, h])?;
        let cols = g.permute(weights, &[0, 2, 1])?;
        let cols = g.reshape(cols, &[n * c * w, h])?;
        let col_sums = g.matmul(cols, ones_h)?;
        let col_marginal = g.reshape(col_sums, &[n * c, w])?;
        let x = g.matmul(col_marginal, xs)?;
        let y = g.matmul(row_marginal, ys)?;
        let pts = g.concat(&[x, y], 1)?;
        g.reshape(pts, &[n, 2 * c])
    }

    /// Six encoded attention points `[N, 12]` from the two masked images.
    pub fn extract_points<T: Real>(&self, g: &mut Graph<'_, T>, mask_a: Var, mask_b: Var) -> Result<Var> {
        self.check_image(g, mask_a, "extract_points")?;
        self.check_image(g, mask_b, "extract_points")?;
        let a = self.convs(g, &self.point_a, mask_a, false)?;
        let b = self.convs(g, &self.point_b, mask_b, false)?;
        let pa = self.spatial_softmax(g, a)?;
        let pb = self.spatial_softmax(g, b)?;
        g.concat(&[pa, pb], 1)
    }

    /// Gaussian heatmaps `[N, 6, F, F]` centred on `[N, 12]` points.
    pub fn heatmaps<T: Real>(&self, g: &mut Graph<'_, T>, points: Var) -> Result<Var> {
        let f = self.feature_size;
        g.gaussian_heatmaps(points, f, f, T::from_f64_lossy(self.sigma as f64))
    }

    /// Gated decoding of the next image.
    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, features: Var, heatmaps: Var) -> Result<Var> {
        if g.shape(features) != g.shape(heatmaps) {
            return Err(Error::shape("decode_image", format!("features {:?} vs heatmaps {:?}", g.shape(features), g.shape(heatmaps))));
        }
        let gated = g.mul(features, heatmaps)?;
        self.convs(g, &self.decoder, gated, false)
    }

    /// Per-image output shape `[H, W, C]` of every stage, in evaluation order.
    pub fn stage_shapes(&self, store: &ParamStore) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut side = self.image_size;
        for (i, c) in self.encoder.iter().enumerate() {
            side -= store.value(c.w).shape()[2] - 1;
            out.push((format!("image encoder conv {}", i + 1), vec![side, side, store.value(c.w).shape()[0]]));
        }
        for (name, convs) in [("point encoder a", &self.point_a), ("point encoder b", &self.point_b)] {
            side = self.image_size;
            for (i, c) in convs.iter().enumerate() {
                side -= store.value(c.w).shape()[2] - 1;
                out.push((format!("{name} conv {}", i + 1), vec![side, side, store.value(c.w).shape()[0]]));
            }
            out.push((format!("{name} spatial softmax"), vec![POINTS_PER_ENCODER, 2]));
        }
        out.push(("heatmaps".into(), vec![side, side, POINTS]));
        for (i, c) in self.decoder.iter().enumerate() {
            side += store.value(c.w).shape()[2] - 1;
            out.push((format!("decoder transposed conv {}", i + 1), vec![side, side, store.value(c.w).shape()[1]]));
        }
        out
    }
}

/// Direct weighted sum `sum_p softmax(a / tau)_p * (x_p, y_p)` for one
/// `h x w` channel, independent of the tape.
pub fn soft_argmax_reference(act: &[f64], h: usize, w: usize, tau: f64) -> (f64, f64) {
    let max = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = act.iter().map(|a| ((a - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    let (mut x, mut y) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let p = e[r * w + c] / z;
            x += p * c as f64 / (w - 1) as f64;
            y += p * r as f64 / (h - 1) as f64;
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore, Vision) {
        let mut store = ParamStore::new();
        let v = Vision::new(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.init_seed), cfg).unwrap();
        (store, v)
    }

    fn softmax_points(v: &Vision, store: &ParamStore, act: Tensor<f64>) -> Vec<f64> {
        let mut g: Graph<f64> = Graph::frozen(store);
        let a = g.constant(act);
        let p = v.spatial_softmax(&mut g, a).unwrap();
        g.value(p).data().to_vec()
    }

    #[test]
    fn encoder_feature_map_shape() {
        let cfg = Config::paper().model;
        let (store, v) = build(&cfg);
        let mut g: Graph = Graph::frozen(&store);
        let x = g.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let f = v.encode_image(&mut g, x).unwrap();
        assert_eq!(g.shape(f), [2, 6, 58, 58]);
        let bad = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
        assert!(v.encode_image(&mut g, bad).is_err());
    }

    #[test]
    fn spatial_softmax_gradient_matches_finite_differences() {
        let (store, v) = build(&Config::desk().model);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..2 * 2 * 4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = crate::tensor::gradcheck::check_with_store(&store, &[Tensor::new(&[2, 2, 4, 5], x).unwrap()], 1e-4, 1e-2, |g, vars| {
            let p = v.spatial_softmax(g, vars[0])?;
            let wv = g.constant(Tensor::new(&[2, 4], w.clone())?);
            let y = g.mul(p, wv)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_map() {
        let cfg = Config::desk().model;
        let (mut store, v) = build(&cfg);
        for c in &v.encoder {
            let n = store.value(c.b).len();
            store.set(c.b, Tensor::zeros(&[n])).unwrap();
        }
        let mut g: Graph = Graph::frozen(&store);
        let x = g.constant(Tensor::zeros(&[1, 3, 24, 24]));
        let f = v.encode_image(&mut g, x).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_softmax_delta_uniform_and_half_plane() {
        let (store, v) = build(&Config::paper().model);
        let f = 58;
        let mut delta = vec![0.0; f * f];
        delta[29 * f + 29] = 1e4;
        let p = softmax_points(&v, &store, Tensor::new(&[1, 1, f, f], delta).unwrap());
        assert!((p[0] - 0.5).abs() <= 1.0 / 58.0 && (p[1] - 0.5).abs() <= 1.0 / 58.0);

        let p = softmax_points(&v, &store, Tensor::new(&[1, 1, f, f], vec![0.7; f * f]).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert_eq!(p[0], p[1]);
        for f in [3, 12, 22] {
            let p = softmax_points(&v, &store, Tensor::new(&[1, 1, f, f], vec![-1.3; f * f]).unwrap());
            assert_eq!(p[0], p[1], "{f}x{f}");
        }

        let half: Vec<f64> = (0..f * f).map(|i| if i % f < f / 2 { 50.0 } else { -50.0 }).collect();
        let p = softmax_points(&v, &store, Tensor::new(&[1, 1, f, f], half.clone()).unwrap());
        let (rx, ry) = soft_argmax_reference(&half, f, f, 1.0);
        assert!((p[0] - rx).abs() < 1e-9 && (p[1] - ry).abs() < 1e-9);
        assert!((rx - 0.245).abs() < 5e-3, "{rx}");
    }

    #[test]
    fn spatial_softmax_matches_reference_on_random_maps() {
        let (store, v) = build(&Config::desk().model);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let act: Vec<f64> = (0..2 * 18 * 18).map(|_| rng.random_range(-4.0..4.0)).collect();
            let p = softmax_points(&v, &store, Tensor::new(&[1, 2, 18, 18], act.clone()).unwrap());
            for c in 0..2 {
                let (rx, ry) = soft_argmax_reference(&act[c * 324..(c + 1) * 324], 18, 18, 1.0);
                assert!((p[2 * c] - rx).abs() < 1e-12 && (p[2 * c + 1] - ry).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heatmap_peak_and_duplicates() {
        let (store, v) = build(&Config::paper().model);
        let mut g: Graph<f64> = Graph::frozen(&store);
        let mut pts = vec![0.5; 12];
        pts[2] = 0.2;
        pts[3] = 0.7;
        pts[4] = 0.2;
        pts[5] = 0.7;
        let p = g.constant(Tensor::new(&[1, 12], pts).unwrap());
        let h = v.heatmaps(&mut g, p).unwrap();
        assert_eq!(g.shape(h), [1, 6, 58, 58]);
        let d = g.value(h).data();
        let plane = 58 * 58;
        let first = &d[..plane];
        let argmax = (0..plane).max_by(|&a, &b| first[a].total_cmp(&first[b])).unwrap();
        assert!((argmax / 58).abs_diff(29) <= 1 && (argmax % 58).abs_diff(29) <= 1);
        assert_eq!(&d[plane..2 * plane], &d[2 * plane..3 * plane]);

        let mut g: Graph<f64> = Graph::frozen(&store);
        let p = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let h = g.gaussian_heatmaps(p, 58, 58, 0.1).unwrap();
        assert_eq!(g.value(h).data()[57 * 58], 1.0);
    }

    #[test]
    fn decoder_shapes_and_gating() {
        let cfg = Config::paper().model;
        let (store, v) = build(&cfg);
        let mut g: Graph = Graph::frozen(&store);
        let feats = g.constant(Tensor::full(&[1, 6, 58, 58], 1.0));
        let heat = g.constant(Tensor::zeros(&[1, 6, 58, 58]));
        let gated = g.mul(feats, heat).unwrap();
        assert!(g.value(gated).data().iter().all(|&x| x == 0.0));
        let out = v.decode(&mut g, feats, heat).unwrap();
        assert_eq!(g.shape(out), [1, 3, 64, 64]);
        let shapes = v.stage_shapes(&store);
        let dec: Vec<&Vec<usize>> = shapes.iter().filter(|(n, _)| n.starts_with("decoder")).map(|(_, s)| s).collect();
        assert_eq!(dec, [&vec![60, 60, 18], &vec![62, 62, 36], &vec![64, 64, 3]]);
        let bad = g.constant(Tensor::zeros(&[1, 6, 20, 20]));
        assert!(v.decode(&mut g, feats, bad).is_err());
    }

    #[test]
    fn heatmap_gating_far_from_points() {
        let (store, v) = build(&Config::paper().model);
        let mut g: Graph<f64> = Graph::frozen(&store);
        let p = g.constant(Tensor::new(&[1, 12], vec![0.5; 12]).unwrap());
        let h = v.heatmaps(&mut g, p).unwrap();
        let d = g.value(h).data();
        for r in 0..58 {
            for c in 0..58 {
                let (x, y) = (c as f64 / 57.0 - 0.5, r as f64 / 57.0 - 0.5);
                if (x * x + y * y).sqrt() >= 0.3 {
                    assert!(d[r * 58 + c] < 0.012);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn spatial_softmax_stays_in_grid_hull(seed in 0u64..10_000, scale in 0.1f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (store, v) = build(&Config::tiny().model);
            let act: Vec<f64> = (0..3 * 6 * 7).map(|_| rng.random_range(-scale..scale)).collect();
            let p = softmax_points(&v, &store, Tensor::new(&[1, 3, 6, 7], act).unwrap());
            proptest::prop_assert!(p.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
