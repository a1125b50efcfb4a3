#![allow(dead_code)]

use dogfit::neural::{Activation, Architecture, Denoiser};
use dogfit::{rng_from_seed, Label};

/// Small w-conditioned net with about a thousand parameters.
pub fn small_arch(w_conditioning: bool) -> Architecture {
    Architecture {
        hidden: vec![24, 24],
        embed_dim: 8,
        ..Architecture::standard(3, w_conditioning)
    }
}

/// A small model with nonzero w projection so every tensor is exercised.
pub fn small_model(seed: u64) -> Denoiser {
    let mut m = Denoiser::new(small_arch(true), &mut rng_from_seed(seed)).unwrap();
    for (i, v) in m.params_mut().tensor_mut("w_proj").unwrap().iter_mut().enumerate() {
        *v = 0.3 - 0.05 * i as f32;
    }
    m
}

fn tensor<'a>(m: &Denoiser, p: &'a [f64], name: &str) -> &'a [f64] {
    &p[m.params().range(name).unwrap()]
}

/// Straight-line evaluation of the denoiser for one input, written without
/// any of the library's batching or matrix code.
pub fn oracle_forward(m: &Denoiser, p: &[f64], x: [f64; 2], t_norm: f64, label: Label, w: f64) -> [f64; 2] {
    let a = m.arch();
    let e = a.embed_dim;
    let half = e / 2;
    let row = label.unwrap_or(a.num_classes);
    let lab = &tensor(m, p, "label_embed")[row * e..(row + 1) * e];
    let frozen = &tensor(m, p, "label_embed_frozen")[row * e..(row + 1) * e];
    let wp = tensor(m, p, "w_proj");
    let mut h: Vec<f64> = vec![x[0], x[1]];
    for i in 0..e {
        let k = i % half;
        let freq = (-(a.max_period.ln()) * k as f64 / half as f64).exp();
        let arg = t_norm * a.time_scale * freq;
        let mut c = if i < half { arg.sin() } else { arg.cos() } + lab[i];
        if a.w_conditioning {
            c += (w - 1.0) * wp[i] * frozen[i];
        }
        h.push(c);
    }
    let layers = a.hidden.len() + 1;
    for l in 0..layers {
        let wt = tensor(m, p, &format!("dense{l}.weight"));
        let b = tensor(m, p, &format!("dense{l}.bias"));
        let fan_in = h.len();
        let fan_out = b.len();
        let mut z = vec![0.0; fan_out];
        for o in 0..fan_out {
            let mut s = b[o];
            for i in 0..fan_in {
                s += wt[o * fan_in + i] * h[i];
            }
            z[o] = s;
        }
        h = if l + 1 == layers {
            z
        } else {
            z.iter()
                .map(|&v| match a.activation {
                    Activation::Silu => v / (1.0 + (-v).exp()),
                    Activation::Tanh => v.tanh(),
                })
                .collect()
        };
    }
    [h[0], h[1]]
}

pub struct Probe {
    pub x: Vec<[f64; 2]>,
    pub t: Vec<f64>,
    pub labels: Vec<Label>,
    pub w: Vec<f64>,
    pub target: Vec<[f64; 2]>,
}

/// Mean squared error of the oracle forward over a probe batch.
pub fn oracle_loss(m: &Denoiser, p: &[f64], b: &Probe) -> f64 {
    let mut s = 0.0;
    for i in 0..b.x.len() {
        let o = oracle_forward(m, p, b.x[i], b.t[i], b.labels[i], b.w[i]);
        s += (o[0] - b.target[i][0]).powi(2) + (o[1] - b.target[i][1]).powi(2);
    }
    s / b.x.len() as f64
}

pub fn probe_batch(seed: u64) -> Probe {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let n = 6;
    let labels = vec![Some(0), Some(1), Some(2), None, Some(1), None];
    Probe {
        x: (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect(),
        t: (0..n).map(|_| rng.random::<f64>()).collect(),
        labels,
        w: (0..n).map(|_| 1.0 + 2.0 * rng.random::<f64>()).collect(),
        target: (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
    }
}
