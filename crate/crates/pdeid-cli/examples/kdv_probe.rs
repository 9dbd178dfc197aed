// Temporary diagnostic: map the KdV likelihood surface per snapshot pair.
// Runs a derivative-free simplex search from a truth-adjacent start and from
// the zero start, printing where each lands and with what NLML.

use pdeid_cli::config::ExperimentConfig;
use pdeid_cli::harness::{build_pair, generate_field, RunSeeds};
use pdeid_core::inference::{nlml_value, ParamLayout, ParamVector};
use pdeid_core::operator::{ModelFamily, ModelSpec};

fn nelder_mead<F>(f: &F, x0: Vec<f64>, steps: &[f64], max_evals: usize) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.clone(), f(&x0)));
    for i in 0..n {
        let mut p = x0.clone();
        p[i] += steps[i];
        let fp = f(&p);
        simplex.push((p, fp));
    }
    let mut evals = n + 1;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() < 1e-10 * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let xw = simplex[n].0.clone();
        let refl: Vec<f64> =
            centroid.iter().zip(&xw).map(|(c, w)| c + (c - w)).collect();
        let fr = f(&refl);
        evals += 1;
        if fr < simplex[0].1 {
            let exp: Vec<f64> =
                centroid.iter().zip(&xw).map(|(c, w)| c + 2.0 * (c - w)).collect();
            let fe = f(&exp);
            evals += 1;
            simplex[n] = if fe < fr { (exp, fe) } else { (refl, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (refl, fr);
        } else {
            let con: Vec<f64> =
                centroid.iter().zip(&xw).map(|(c, w)| c + 0.5 * (w - c)).collect();
            let fc = f(&con);
            evals += 1;
            if fc < simplex[n].1 {
                simplex[n] = (con, fc);
            } else {
                let x0s = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> =
                        x0s.iter().zip(&item.0).map(|(a, b)| a + 0.5 * (b - a)).collect();
                    let fp = f(&p);
                    evals += 1;
                    *item = (p, fp);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex.swap_remove(0)
}

fn main() {
    let cfg = ExperimentConfig::from_text(
        "[experiment]\nfamily = kdv\noutput_dir = /tmp/probe\n",
    )
    .expect("config");
    let field = generate_field(&cfg).expect("solve");
    let model = ModelSpec::new(ModelFamily::Kdv, vec![0.0, 0.0]).expect("model");
    let layout = ParamLayout::for_family(ModelFamily::Kdv);
    let seeds = RunSeeds { noise: 1, subsample: 2, train: 0 };

    let pairs: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("pair index"))
        .collect();
    let pairs = if pairs.is_empty() {
        vec![20, 40, 60, 80, 100, 120, 140, 160, 180]
    } else {
        pairs
    };

    for &p in &pairs {
        let built = build_pair(&field, ModelFamily::Kdv, p, 1, 109, 111, 0.0, seeds)
            .expect("pair");
        let pair = built.pair;
        let eval = |enc: &[f64]| -> f64 {
            match ParamVector::new(layout.clone(), enc.to_vec()) {
                Ok(pv) => nlml_value(&model, &pair, &pv).unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            }
        };
        // data-driven theta start: amplitude ~ sample std, width ~ 2/range
        let mut mean = 0.0;
        for v in pair.h_prev(0).iter().chain(pair.h_curr(0)) {
            mean += v;
        }
        mean /= (pair.h_prev(0).len() + pair.h_curr(0).len()) as f64;
        let mut var = 0.0;
        for v in pair.h_prev(0).iter().chain(pair.h_curr(0)) {
            var += (v - mean) * (v - mean);
        }
        var /= (pair.h_prev(0).len() + pair.h_curr(0).len()) as f64;
        let g0 = var.sqrt().max(1e-3).ln();
        let w0 = (2.0_f64 / 40.0).ln();
        let s0 = (var * 1e-6).max(1e-12).ln();
        // truth probe: profile (gamma, w, sigma2) at frozen lambda = (6, 1),
        // then release everything with small steps so the search stays local
        let eval3 = |t: &[f64]| eval(&[t[0], t[1], 6.0, 1.0, t[2]]);
        let (th, _) = nelder_mead(&eval3, vec![g0, w0, s0], &[0.4, 0.4, 1.5], 700);
        let start_t = vec![th[0], th[1], 6.0, 1.0, th[2]];
        let ft0 = eval(&start_t);
        let small = [0.05, 0.05, 0.05, 0.05, 0.1];
        let (xt, ft) = nelder_mead(&eval, start_t, &small, 900);
        // zero start mirrors training's fixed coefficient init, wide theta
        let steps = [0.4, 0.4, 0.5, 0.3, 1.0];
        let (x1, f1) = nelder_mead(&eval, vec![g0, w0, 0.0, 0.0, s0], &steps, 1200);
        let (xz, fz) = nelder_mead(&eval, x1.clone(), &small, 600).min_by(f1, x1);
        let dt = |x: &[f64]| {
            let pv = ParamVector::new(layout.clone(), x.to_vec()).unwrap();
            let d = pv.decoded_entries();
            (d[2], d[3], d[4])
        };
        let (t1, t2, ts) = dt(&xt);
        let (z1, z2, zs) = dt(&xz);
        println!(
            "pair {p:3}: truth-start l=({t1:8.4},{t2:8.4}) s2={ts:9.3e} nlml={ft:9.2} | zero-start l=({z1:8.4},{z2:8.4}) s2={zs:9.3e} nlml={fz:9.2}{}",
            if ft < fz { "  TRUTH-BASIN WINS" } else { "" }
        );
    }
}

trait MinBy {
    fn min_by(self, f1: f64, x1: Vec<f64>) -> (Vec<f64>, f64);
}

impl MinBy for (Vec<f64>, f64) {
    fn min_by(self, f1: f64, x1: Vec<f64>) -> (Vec<f64>, f64) {
        if self.1 < f1 {
            self
        } else {
            (x1, f1)
        }
    }
}
