//! Oracle checks runnable from the command line. Each check compares an
//! optimized kernel against a naive reference or a value fixed by
//! construction.

use std::fmt;

use serde::Serialize;

use crate::config::{Variant, CORR_SIDE, SOFTARGMAX_SIGMA, SOFTARGMAX_TAU};
use crate::corr_encoder::encode_branch_traced;
use crate::correlation::{local_corr_4d, local_corr_4d_oracle};
use crate::metrics::{average_jaccard, FrameSize, GroundTruthTrack};
use crate::numerics::{bilinear_sample, conv2d, group_norm, linear, Padding, Tensor};
use crate::oracle;
use crate::refiner::{build_bias, BiasTable, RefinerConfig};
use crate::rng::{RngSeed, SeededRng};
use crate::track_init::{kernel_softargmax_f64, kernel_softargmax_grad, OcclusionTrack, Track};
use crate::weights::{init_weights, WeightsContainer};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<22} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let n = self.checks.iter().filter(|c| c.passed).count();
        write!(f, "{n}/{} checks passed", self.checks.len())
    }
}

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.uniform_vec(n, -1.0, 1.0)).unwrap()
}

fn max_err(name: &'static str, err: f32, tol: f32) -> Check {
    Check {
        name,
        passed: err < tol,
        detail: format!("max abs diff {err:.2e} (tol {tol:.0e})"),
    }
}

fn conv() -> Check {
    let mut rng = SeededRng::new(11);
    let mut worst = 0.0f32;
    for (h, w, cin, cout, k, s) in [(9, 7, 3, 5, 3, 1), (8, 8, 4, 6, 3, 2), (7, 7, 49, 8, 5, 4), (6, 5, 2, 3, 2, 2)] {
        let x = random(&mut rng, &[h, w, cin]);
        let kern = random(&mut rng, &[k, k, cin, cout]);
        let b = random(&mut rng, &[cout]);
        for pad in [Padding::Same, Padding::Valid] {
            let fast = conv2d(&x, &kern, Some(&b), s, pad).unwrap();
            worst = worst.max(fast.max_abs_diff(&oracle::conv2d_naive(&x, &kern, Some(&b), s, pad)));
        }
    }
    max_err("conv2d", worst, 1e-4)
}

fn dense_and_norm() -> Check {
    let mut rng = SeededRng::new(12);
    let x = random(&mut rng, &[5, 12]);
    let (wt, b) = (random(&mut rng, &[12, 7]), random(&mut rng, &[7]));
    let mut worst = linear(&x, &wt, &b).unwrap().max_abs_diff(&oracle::linear_naive(&x, &wt, &b));
    let m = random(&mut rng, &[4, 3, 32]);
    let (g, beta) = (random(&mut rng, &[32]), random(&mut rng, &[32]));
    let fast = group_norm(&m, 16, &g, &beta, 1e-5).unwrap();
    worst = worst.max(fast.max_abs_diff(&oracle::group_norm_naive(&m, 16, &g, &beta, 1e-5)));
    max_err("linear+group_norm", worst, 1e-4)
}

fn bilinear() -> Check {
    let mut rng = SeededRng::new(13);
    let m = random(&mut rng, &[6, 9, 4]);
    let pts: Vec<(f32, f32)> = (0..40).map(|_| (rng.uniform(-2.0, 10.0), rng.uniform(-2.0, 7.0))).collect();
    let fast = bilinear_sample(&m, &pts).unwrap();
    let worst = pts
        .iter()
        .enumerate()
        .flat_map(|(i, &(x, y))| {
            let row = fast.data()[i * 4..(i + 1) * 4].to_vec();
            oracle::bilinear_naive(&m, x, y).into_iter().zip(row).map(|(a, b)| (a - b).abs())
        })
        .fold(0.0, f32::max);
    max_err("bilinear", worst, 1e-6)
}

fn local_corr() -> Check {
    let mut rng = SeededRng::new(14);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let a = random(&mut rng, &[16, 16, 8]);
        let b = random(&mut rng, &[16, 16, 8]);
        let p = (rng.uniform(-2.0, 17.0), rng.uniform(-2.0, 17.0));
        let q = (rng.uniform(0.0, 15.0), rng.uniform(0.0, 15.0));
        let fast = local_corr_4d(a.map_view().unwrap(), b.map_view().unwrap(), p, q, 3, 3).unwrap();
        worst = worst.max(fast.vol.max_abs_diff(&local_corr_4d_oracle(&a, &b, p, q, 3, 3).vol));
    }
    max_err("local_corr_4d", worst, 1e-5)
}

fn softargmax() -> Check {
    let mut rng = SeededRng::new(15);
    let (tau, sigma) = (SOFTARGMAX_TAU as f64, SOFTARGMAX_SIGMA as f64);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let vals: Vec<f64> = (0..49).map(|_| rng.uniform(-0.3, 0.3) as f64).collect();
        let (gx, gy) = kernel_softargmax_grad(&vals, 7, 7, tau, sigma);
        let peak = kernel_softargmax_f64(&vals, 7, 7, tau, sigma).peak;
        for i in 0..49 {
            if i == peak.0 * 7 + peak.1 {
                continue;
            }
            let h = 1e-6;
            let mut up = vals.clone();
            up[i] += h;
            let mut dn = vals.clone();
            dn[i] -= h;
            let (a, b) = (kernel_softargmax_f64(&up, 7, 7, tau, sigma), kernel_softargmax_f64(&dn, 7, 7, tau, sigma));
            if a.peak != peak || b.peak != peak {
                continue;
            }
            let fx = (a.x - b.x) / (2.0 * h);
            let fy = (a.y - b.y) / (2.0 * h);
            worst = worst.max((fx - gx[i]).abs()).max((fy - gy[i]).abs());
        }
    }
    Check {
        name: "softargmax_grad",
        passed: worst < 1e-5,
        detail: format!("max gradient error {worst:.2e}"),
    }
}

fn bias_mask() -> Check {
    let cfg = RefinerConfig::new(Variant::Base);
    let table = BiasTable::geometric(cfg.heads);
    let t = 24;
    let b = build_bias(t, &cfg, &table);
    let half = cfg.heads / 2;
    let mut ok = true;
    for h in 0..cfg.heads {
        for i in 0..t {
            for j in 0..t {
                let v = b.at(&[h, i, j]);
                let blocked = if h < half { j > i } else { j < i };
                let want = -table.slopes[h] * i.abs_diff(j) as f32;
                ok &= if blocked { v == f32::NEG_INFINITY } else { v == want };
            }
        }
    }
    Check {
        name: "attention_bias",
        passed: ok,
        detail: format!("{} heads, T={t}", cfg.heads),
    }
}

fn encoder_shapes() -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for (variant, expect) in [(Variant::Base, vec![7, 4, 2, 1]), (Variant::Small, vec![7, 2, 1])] {
        let w = init_weights(variant, RngSeed(0));
        let vol = local_corr_4d_oracle(&Tensor::full(&[8, 8, 2], 1.0), &Tensor::full(&[8, 8, 2], 1.0), (3.0, 3.0), (3.0, 3.0), 3, 3);
        let (out, trace) = encode_branch_traced(&vol, &w, variant, 0).unwrap();
        let sides: Vec<usize> = trace.iter().map(|s| s[0]).collect();
        ok &= sides == expect && out.len() == variant.encoder_width() && vol.vol.shape() == [CORR_SIDE; 4];
        detail.push(format!("{}: {sides:?}", variant.short_name()));
    }
    Check {
        name: "encoder_shapes",
        passed: ok,
        detail: detail.join(", "),
    }
}

fn jaccard_hand_case() -> Check {
    let positions: Vec<[f32; 2]> = (0..4).map(|t| [100.0 + t as f32, 120.0]).collect();
    let gt = GroundTruthTrack {
        positions: positions.clone(),
        visible: vec![true; 4],
    };
    let pred = Track {
        positions: positions.iter().zip([0.5, 3.0, 3.0, 20.0]).map(|(p, d)| [p[0] + d, p[1]]).collect(),
    };
    let occ = OcclusionTrack { logits: vec![-5.0; 4] };
    let aj = average_jaccard(&pred, &occ, &gt, FrameSize::EVAL).map(|j| j.aj).unwrap_or(f64::NAN);
    Check {
        name: "average_jaccard",
        passed: aj == 0.55,
        detail: format!("hand case AJ {aj}"),
    }
}

fn container_round_trip() -> Check {
    let w = init_weights(Variant::Small, RngSeed(3));
    let back = WeightsContainer::from_bytes(&w.to_bytes());
    let same = back.as_ref().is_ok_and(|b| {
        b.len() == w.len()
            && w.iter().all(|(n, t)| {
                b.get(n).is_ok_and(|u| {
                    u.shape() == t.shape() && u.data().iter().zip(t.data()).all(|(a, c)| a.to_bits() == c.to_bits())
                })
            })
    });
    Check {
        name: "ltw1_round_trip",
        passed: same,
        detail: format!("{} tensors", w.len()),
    }
}

pub fn run_selftest() -> SelftestReport {
    SelftestReport {
        checks: vec![
            conv(),
            dense_and_norm(),
            bilinear(),
            local_corr(),
            softargmax(),
            bias_mask(),
            encoder_shapes(),
            jaccard_hand_case(),
            container_round_trip(),
        ],
    }
}
