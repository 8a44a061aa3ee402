//! Shared oracles for the integration suites: central finite differences and
//! a brute-force best-match mIOU.
#![allow(dead_code)]

use dynaseg::labels::LabelMap;
use dynaseg::loss::weighted_loss;
use dynaseg::model::{assign_labels, forward, ModelParams};
use dynaseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂), or 0 when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let plus = f(&probe);
            probe[i] = orig - FD_STEP;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Σ weights ⊙ t, the scalar probe used to check a vector-valued layer.
pub fn dot(t: &Tensor, weights: &Tensor) -> f64 {
    t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

pub fn relabel(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape(), data.to_vec()).unwrap()
}

/// Sign pattern of every ReLU input and every neighbour difference of r′.
/// A finite-difference step that flips any of these crosses a kink.
pub fn kink_signature(params: &ModelParams, image: &Tensor) -> Vec<i8> {
    let (r, cache) = forward(params, image).unwrap();
    let sign = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
    let mut sig: Vec<i8> = cache
        .pre_activations()
        .flat_map(|t| t.data().iter().map(|&v| sign(v)))
        .collect();
    let (q, h, w) = r.dims3().unwrap();
    let d = r.data();
    for c in 0..q {
        for y in 0..h {
            for x in 0..w {
                let i = (c * h + y) * w + x;
                if y + 1 < h {
                    sig.push(sign(d[i + w] - d[i]));
                }
                if x + 1 < w {
                    sig.push(sign(d[i + 1] - d[i]));
                }
            }
        }
    }
    sig
}

/// Scalar training objective with labels and μ′ held fixed.
pub fn frozen_objective(params: &ModelParams, image: &Tensor, labels: &LabelMap, weight: f64) -> f64 {
    let (r, _) = forward(params, image).unwrap();
    weighted_loss(&r, labels, weight).unwrap().0.total
}

/// Labels of the current forward pass, used as frozen pseudo-targets.
pub fn current_labels(params: &ModelParams, image: &Tensor) -> LabelMap {
    assign_labels(&forward(params, image).unwrap().0).unwrap()
}

/// Best-match mIOU evaluated the slow way: explicit pixel sets for every
/// (segment, cluster) pair.
pub fn brute_force_miou(pred: &LabelMap, gt: &LabelMap) -> f64 {
    use std::collections::BTreeSet;
    let n = pred.labels().len();
    let valid: Vec<usize> = (0..n).filter(|&i| !gt.is_void(gt.labels()[i])).collect();
    let segs: BTreeSet<u32> = valid.iter().map(|&i| gt.labels()[i]).collect();
    let clusters: BTreeSet<u32> = valid.iter().map(|&i| pred.labels()[i]).collect();
    let mut total = 0.0;
    for &g in &segs {
        let gset: BTreeSet<usize> = valid.iter().copied().filter(|&i| gt.labels()[i] == g).collect();
        let mut best = 0.0f64;
        for &c in &clusters {
            let cset: BTreeSet<usize> = valid.iter().copied().filter(|&i| pred.labels()[i] == c).collect();
            let inter = gset.intersection(&cset).count() as f64;
            let union = gset.union(&cset).count() as f64;
            best = best.max(inter / union);
        }
        total += best;
    }
    total / segs.len() as f64
}

/// The 32×32 four-quadrant test image and its ground truth.
pub fn quadrant_image(size: usize) -> (Tensor, LabelMap) {
    const COLORS: [[f64; 3]; 4] = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.15, 0.2, 0.9], [0.95, 0.9, 0.1]];
    let quadrant = |px: usize| (px / size >= size / 2) as usize * 2 + (px % size >= size / 2) as usize;
    let n = size * size;
    let image = Tensor::from_fn(&[3, size, size], |i| COLORS[quadrant(i % n)][i / n]);
    let gt = LabelMap::new(size, size, (0..n).map(|px| quadrant(px) as u32).collect()).unwrap();
    (image, gt)
}

pub mod gradcheck {
    //! One randomized finite-difference check per layer. Each returns the
    //! worst relative error over the tensors it checks.

    use super::*;
    use dynaseg::loss::continuity_loss;
    use dynaseg::model::{backward, init_model, ModelConfig};
    use dynaseg::tensor::{
        batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, relu, relu_backward,
        softmax_cross_entropy, BnParams, ConvParams,
    };

    pub fn conv(seed: u64) -> f64 {
        let mut r = rng(seed);
        let x = uniform_tensor(&mut r, &[2, 4, 4]);
        let w = uniform_tensor(&mut r, &[3, 2, 3, 3]);
        let b: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let probe = uniform_tensor(&mut r, &[3, 4, 4]);
        let params = ConvParams::new(w.clone(), b.clone()).unwrap();
        let (gi, gp) = conv2d_backward(&x, &params, &probe).unwrap();

        let f_in = |d: &[f64]| dot(&conv2d_forward(&relabel(&x, d), &params).unwrap(), &probe);
        let f_w = |d: &[f64]| {
            let p = ConvParams::new(relabel(&w, d), b.clone()).unwrap();
            dot(&conv2d_forward(&x, &p).unwrap(), &probe)
        };
        let f_b = |d: &[f64]| {
            let p = ConvParams::new(w.clone(), d.to_vec()).unwrap();
            dot(&conv2d_forward(&x, &p).unwrap(), &probe)
        };
        [
            rel_error(gi.data(), &numeric_grad(x.data(), f_in)),
            rel_error(gp.weights().data(), &numeric_grad(w.data(), f_w)),
            rel_error(gp.bias(), &numeric_grad(&b, f_b)),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn relu_layer(seed: u64) -> f64 {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[3, 4, 5], |_| loop {
            let v: f64 = r.gen_range(-1.0..1.0);
            if v.abs() > 1e-3 {
                break v;
            }
        });
        let probe = uniform_tensor(&mut r, &[3, 4, 5]);
        let g = relu_backward(&x, &probe).unwrap();
        rel_error(
            g.data(),
            &numeric_grad(x.data(), |d| dot(&relu(&relabel(&x, d)), &probe)),
        )
    }

    pub fn batchnorm(seed: u64) -> f64 {
        let mut r = rng(seed);
        let x = uniform_tensor(&mut r, &[4, 5, 5]);
        let gamma: Vec<f64> = (0..4).map(|_| r.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let probe = uniform_tensor(&mut r, &[4, 5, 5]);
        let params = BnParams::new(gamma.clone(), beta.clone(), 1e-5).unwrap();
        let (_, cache) = batchnorm_forward(&x, &params).unwrap();
        let g = batchnorm_backward(&cache, &params, &probe).unwrap();

        let run = |x: &Tensor, p: &BnParams| dot(&batchnorm_forward(x, p).unwrap().0, &probe);
        let f_in = |d: &[f64]| run(&relabel(&x, d), &params);
        let f_g = |d: &[f64]| run(&x, &BnParams::new(d.to_vec(), beta.clone(), 1e-5).unwrap());
        let f_b = |d: &[f64]| run(&x, &BnParams::new(gamma.clone(), d.to_vec(), 1e-5).unwrap());
        [
            rel_error(g.input.data(), &numeric_grad(x.data(), f_in)),
            rel_error(&g.gamma, &numeric_grad(&gamma, f_g)),
            rel_error(&g.beta, &numeric_grad(&beta, f_b)),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn cross_entropy(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (q, h, w) = (5, 3, 4);
        let logits = Tensor::from_fn(&[q, h, w], |_| r.gen_range(-3.0..3.0));
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..q as u32)).collect()).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let f = |d: &[f64]| softmax_cross_entropy(&relabel(&logits, d), &labels).unwrap().0;
        rel_error(g.data(), &numeric_grad(logits.data(), f))
    }

    pub fn continuity(seed: u64) -> f64 {
        let mut r = rng(seed);
        // Redraw until no neighbour difference sits near the L1 kink.
        let x = loop {
            let t = uniform_tensor(&mut r, &[3, 4, 5]);
            let d = t.data();
            let near_kink = (0..d.len()).any(|i| {
                let (y, x) = ((i / 5) % 4, i % 5);
                (y + 1 < 4 && (d[i + 5] - d[i]).abs() < 1e-3) || (x + 1 < 5 && (d[i + 1] - d[i]).abs() < 1e-3)
            });
            if !near_kink {
                break t;
            }
        };
        let (_, g) = continuity_loss(&x).unwrap();
        let f = |d: &[f64]| continuity_loss(&relabel(&x, d)).unwrap().0;
        rel_error(g.data(), &numeric_grad(x.data(), f))
    }

    /// Whole network plus the weighted loss on a 3×8×8 image (M=2, p=q=6),
    /// with labels and μ′ frozen. Coordinates whose ±h step flips a ReLU or
    /// L1 sign are skipped. Returns (worst error, coordinates checked).
    pub fn end_to_end(seed: u64) -> (f64, usize) {
        let cfg = ModelConfig {
            m_components: 2,
            feature_dim: 6,
            cluster_dim: 6,
            input_channels: 3,
        };
        let mut r = rng(seed);
        let image = Tensor::from_fn(&[3, 8, 8], |_| r.gen_range(0.0..1.0));
        let mut params = init_model(&cfg, seed).unwrap();
        // Move BN affine parameters off their initial values so they matter.
        for buf in params.buffers_mut() {
            if buf.len() == 6 {
                for v in buf.iter_mut() {
                    *v += r.gen_range(-0.3..0.3);
                }
            }
        }
        let weight = r.gen_range(0.1..5.0);
        let labels = current_labels(&params, &image);
        let base_sig = kink_signature(&params, &image);

        let (rp, cache) = forward(&params, &image).unwrap();
        let (_, grad_r) = weighted_loss(&rp, &labels, weight).unwrap();
        let grads = backward(&cache, &params, &grad_r).unwrap();
        let analytic: Vec<f64> = grads.buffers().concat();

        let mut numeric = Vec::new();
        let mut kept = Vec::new();
        let n_buffers = params.buffers().len();
        let mut flat = 0;
        for b in 0..n_buffers {
            let len = params.buffers()[b].len();
            for i in 0..len {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.buffers_mut()[b][i] += delta;
                    (
                        frozen_objective(&p, &image, &labels, weight),
                        kink_signature(&p, &image),
                    )
                };
                let (plus, sig_p) = eval(FD_STEP);
                let (minus, sig_m) = eval(-FD_STEP);
                if sig_p == base_sig && sig_m == base_sig {
                    numeric.push((plus - minus) / (2.0 * FD_STEP));
                    kept.push(analytic[flat]);
                }
                flat += 1;
            }
        }
        (rel_error(&kept, &numeric), kept.len())
    }
}

/// Best-match mIOU over maps of at most 16 pixels, computed with pixel bitmasks.
pub fn bitmask_miou(pred: &[u32], gt: &[u32]) -> f64 {
    let mask = |labels: &[u32], l: u32| {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == l)
            .fold(0u16, |m, (i, _)| m | 1 << i)
    };
    let mut segs: Vec<u32> = gt.to_vec();
    segs.sort_unstable();
    segs.dedup();
    let mut clusters: Vec<u32> = pred.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let total: f64 = segs
        .iter()
        .map(|&g| {
            let gm = mask(gt, g);
            clusters
                .iter()
                .map(|&c| {
                    let cm = mask(pred, c);
                    (gm & cm).count_ones() as f64 / (gm | cm).count_ones() as f64
                })
                .fold(0.0, f64::max)
        })
        .sum();
    total / segs.len() as f64
}

/// Every labeling of `n` pixels with labels below `k`, in canonical form
/// (first occurrences appear in increasing order).
pub fn canonical_labelings(n: usize, k: u32) -> Vec<Vec<u32>> {
    fn extend(cur: &mut Vec<u32>, n: usize, k: u32, next: u32, out: &mut Vec<Vec<u32>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for l in 0..next.min(k - 1) + 1 {
            cur.push(l);
            extend(cur, n, k, next.max(l + 1), out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), n, k, 0, &mut out);
    out
}

/// Every labeling of `n` pixels with labels below `k`.
pub fn all_labelings(n: usize, k: u32) -> Vec<Vec<u32>> {
    (0..k.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let l = code % k;
                    code /= k;
                    l
                })
                .collect()
        })
        .collect()
}

pub mod checks {
    //! Property checks shared by the focused test files and the acceptance
    //! report. Each returns a description of the first violation.

    use super::*;
    use dynaseg::loss::{continuity_loss, schedule_weight, similarity_loss, total_loss};
    use dynaseg::{ScheduleKind, WeightSchedule};

    pub type Check = std::result::Result<(), String>;

    pub fn schedule_laws() -> Check {
        let kinds = [ScheduleKind::Fixed, ScheduleKind::Fsf, ScheduleKind::Scf];
        for kind in kinds {
            let s = WeightSchedule::with_default_mu(kind);
            let w: Vec<f64> = (1..=100).map(|q| schedule_weight(&s, q).unwrap()).collect();
            for (i, pair) in w.windows(2).enumerate() {
                let ok = match kind {
                    ScheduleKind::Fixed => pair[1] == pair[0],
                    ScheduleKind::Fsf => pair[1] > pair[0],
                    ScheduleKind::Scf => pair[1] < pair[0],
                };
                if !ok {
                    return Err(format!(
                        "{kind}: weight at q'={} is {}, at q'={} is {}",
                        i + 1,
                        pair[0],
                        i + 2,
                        pair[1]
                    ));
                }
            }
        }
        let scf = schedule_weight(&WeightSchedule::new(ScheduleKind::Scf, 50.0).unwrap(), 100).unwrap();
        let fsf = schedule_weight(&WeightSchedule::new(ScheduleKind::Fsf, 15.0).unwrap(), 100).unwrap();
        if scf != 0.5 || fsf != 20.0 / 3.0 {
            return Err(format!("SCF(50,100)={scf}, FSF(15,100)={fsf}"));
        }
        Ok(())
    }

    fn random_labels(rng: &mut ChaCha8Rng, q: usize, h: usize, w: usize) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..q as u32)).collect()).unwrap()
    }

    /// Total = sim + μ′·con, L_con = 0 on spatially constant maps and
    /// uniform logits cost ln q, on `instances` random cases.
    pub fn loss_identities(instances: u64) -> Check {
        for seed in 0..instances {
            let mut rng = rng(seed);
            let (q, h, w) = (rng.gen_range(2..12), rng.gen_range(2..9), rng.gen_range(2..9));
            let r = uniform_tensor(&mut rng, &[q, h, w]);
            let labels = random_labels(&mut rng, q, h, w);
            let q_prime = rng.gen_range(1..=100);
            for kind in [ScheduleKind::Fixed, ScheduleKind::Fsf, ScheduleKind::Scf] {
                let s = WeightSchedule::new(kind, rng.gen_range(0.5..60.0)).unwrap();
                let (b, _) = total_loss(&r, &labels, &s, q_prime).unwrap();
                let expect = b.similarity + b.effective_weight * b.continuity;
                if ((b.total - expect) / expect).abs() > 1e-12 {
                    return Err(format!("seed {seed} {kind}: total {} vs {expect}", b.total));
                }
                if b.effective_weight != schedule_weight(&s, q_prime).unwrap() {
                    return Err(format!("seed {seed} {kind}: effective weight mismatch"));
                }
            }

            let levels: Vec<f64> = (0..q).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let flat = Tensor::from_fn(&[q, h, w], |i| levels[i / (h * w)]);
            let (con, grad) = continuity_loss(&flat).unwrap();
            if con != 0.0 || grad.data().iter().any(|&g| g != 0.0) {
                return Err(format!("seed {seed}: constant map has L_con {con}"));
            }

            let shift = rng.gen_range(-5.0..5.0);
            let (ce, _) = similarity_loss(&Tensor::from_fn(&[q, h, w], |_| shift), &labels).unwrap();
            if (ce - (q as f64).ln()).abs() > 1e-9 {
                return Err(format!("seed {seed}: uniform CE {ce} vs ln {q}"));
            }
        }
        let labels = LabelMap::filled(4, 4, 17).unwrap();
        let (ce, _) = similarity_loss(&Tensor::zeros(&[100, 4, 4]), &labels).unwrap();
        if (ce - 4.605_170_185_988_091).abs() > 1e-9 {
            return Err(format!("uniform CE over 100 channels is {ce}"));
        }
        Ok(())
    }
}

/// Writes `count` small quadrant-style PNG images with shifted colours, their
/// ground truth as 8-bit PGM and a manifest listing them. Returns the manifest path.
pub fn write_dataset(dir: &std::path::Path, count: usize, size: usize) -> std::path::PathBuf {
    use dynaseg::dataio::{save_image, save_label_map_pgm, ImageTensor};
    let mut manifest = String::new();
    for i in 0..count {
        let (image, gt) = quadrant_image(size);
        let shifted = Tensor::from_fn(image.shape(), |k| {
            (image.data()[k] * (1.0 - 0.05 * i as f64)).clamp(0.0, 1.0)
        });
        let name = format!("img{i}");
        save_image(&ImageTensor::new(shifted).unwrap(), dir.join(format!("{name}.png"))).unwrap();
        save_label_map_pgm(&gt, dir.join(format!("{name}_gt.pgm"))).unwrap();
        manifest.push_str(&format!("{name}.png\t{name}_gt.pgm\n"));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).unwrap();
    path
}

/// Runs the CLI in-process.
pub fn cli(args: &[&str]) -> i32 {
    dynaseg::cli::run(std::iter::once("dynaseg").chain(args.iter().copied()))
}

/// Flags for a quick, small network.
pub const SMALL_NET: [&str; 6] = ["--feature-dim", "12", "--cluster-dim", "12", "--iters", "12"];

pub mod miou_checks {
    //! Exhaustive and randomized comparisons of `mean_iou` with the oracles.

    use super::*;
    use dynaseg::metrics::mean_iou;

    pub type Check = std::result::Result<(), String>;

    fn compare(h: usize, w: usize, pred: &[u32], gt: &[u32]) -> Check {
        let p = LabelMap::new(h, w, pred.to_vec()).unwrap();
        let g = LabelMap::new(h, w, gt.to_vec()).unwrap();
        let got = mean_iou(&p, &g).map_err(|e| e.to_string())?;
        let want = bitmask_miou(pred, gt);
        if (got - want).abs() > 1e-12 {
            return Err(format!("{h}x{w} pred {pred:?} gt {gt:?}: {got} vs {want}"));
        }
        Ok(())
    }

    /// Every pair of maps of every shape up to 3×3 with at most 3 labels.
    /// Shapes with more than 6 pixels use canonical labelings on both sides,
    /// which covers every partition pair. Returns the number of pairs.
    pub fn exhaustive() -> std::result::Result<usize, String> {
        let mut pairs = 0;
        for h in 1..=3 {
            for w in 1..=3 {
                let n = h * w;
                let maps = if n <= 6 {
                    all_labelings(n, 3)
                } else {
                    canonical_labelings(n, 3)
                };
                for pred in &maps {
                    for gt in &maps {
                        compare(h, w, pred, gt)?;
                        pairs += 1;
                    }
                }
            }
        }
        Ok(pairs)
    }

    /// Relabeling invariance and perfect self-match on random maps.
    pub fn random(count: u64) -> Check {
        for seed in 0..count {
            let mut rng = rng(1000 + seed);
            let (h, w, k) = (rng.gen_range(1..=10), rng.gen_range(1..=10), rng.gen_range(1..=8u32));
            let mut draw = || LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap();
            let (pred, gt) = (draw(), draw());
            let mut perm: Vec<u32> = (0..k).map(|l| 40 + 3 * l).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % k as usize);
            let relabel =
                |m: &LabelMap| LabelMap::new(h, w, m.labels().iter().map(|&l| perm[l as usize]).collect()).unwrap();
            let base = mean_iou(&pred, &gt).unwrap();
            let moved_gt = mean_iou(&pred, &relabel(&gt)).unwrap();
            let moved_pred = mean_iou(&relabel(&pred), &gt).unwrap();
            if (base - moved_gt).abs() > 1e-12 || (base - moved_pred).abs() > 1e-12 {
                return Err(format!("seed {seed}: relabeling changed mIOU"));
            }
            if mean_iou(&pred, &pred).unwrap() != 1.0 {
                return Err(format!("seed {seed}: self-match below 1"));
            }
            if (base - brute_force_miou(&pred, &gt)).abs() > 1e-12 {
                return Err(format!("seed {seed}: disagrees with set oracle"));
            }
        }
        Ok(())
    }
}
