//! Straight-line f64 reference implementation of the classifier, written
//! without any of the library's tensor code, plus finite-difference helpers
//! and a partition invariant checker.

#![allow(dead_code)]

use std::collections::BTreeSet;

use fpl_core::backbone::{generate_synthetic_backbone, Backbone, SyntheticSpec};
use fpl_core::partition::{PartitionSpec, Regime};

pub fn backbone(classes: usize, width: usize, depth: usize, seed: u64) -> Backbone {
    let mut spec = SyntheticSpec::new(classes, width, depth, seed, 6, 0.05);
    spec.max_len = 12;
    generate_synthetic_backbone(&spec).unwrap().0
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// `a [n×k] · b [k×m]`, row-major.
fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    let m = b.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += b[i % m];
    }
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = gamma.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = (var + 1e-5).sqrt();
        for j in 0..d {
            o[j] = gamma[j] * (row[j] - mean) / s + beta[j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Every learnable tensor of the classifier in f64.
#[derive(Clone, Debug)]
pub struct RefModel {
    pub d: usize,
    pub e: usize,
    pub heads: usize,
    pub max_len: usize,
    pub pos: Vec<f64>,
    /// Twelve tensors per block in serialization order.
    pub blocks: Vec<Vec<Vec<f64>>>,
    pub proj: Vec<f64>,
    pub classes: usize,
    pub tokens_per_class: usize,
    pub tokens: Vec<f64>,
    /// Image-side head `z = normalize(x·W + b)`; absent for the prompt classifier.
    pub head: Option<(Vec<f64>, Vec<f64>)>,
}

impl RefModel {
    pub fn from_backbone(b: &Backbone) -> Self {
        let enc = b.encoder();
        let cfg = enc.config();
        let p = enc.params();
        let pos = to64(p[0].data());
        let blocks = (0..cfg.depth).map(|l| (0..12).map(|i| to64(p[1 + 12 * l + i].data())).collect()).collect();
        let proj = to64(p[p.len() - 1].data());
        Self {
            d: cfg.width,
            e: cfg.out_dim,
            heads: cfg.heads,
            max_len: cfg.max_len,
            pos,
            blocks,
            proj,
            classes: b.classes(),
            tokens_per_class: b.class_tokens().tokens_per_class(),
            tokens: to64(b.class_tokens().table().data()),
            head: None,
        }
    }

    /// Sizes of every tensor in the flat full-model layout.
    pub fn flat_sizes(&self) -> Vec<usize> {
        let (d, h) = (self.d, 4 * self.d);
        let block = [d, d, d * 3 * d, 3 * d, d * d, d, d, d, d * h, h, h * d, d];
        let mut s = vec![self.max_len * d];
        for _ in &self.blocks {
            s.extend_from_slice(&block);
        }
        s.push(d * self.e);
        s.push(self.tokens.len());
        s.push(self.e * self.e);
        s.push(self.e);
        s
    }

    /// Replaces every tensor from a flat full-model parameter vector.
    pub fn with_flat(&self, theta: &[f64]) -> Self {
        let sizes = self.flat_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), theta.len());
        let mut parts = Vec::new();
        let mut at = 0;
        for s in sizes {
            parts.push(theta[at..at + s].to_vec());
            at += s;
        }
        let mut it = parts.into_iter();
        let mut m = self.clone();
        m.pos = it.next().unwrap();
        for b in m.blocks.iter_mut() {
            for t in b.iter_mut() {
                *t = it.next().unwrap();
            }
        }
        m.proj = it.next().unwrap();
        m.tokens = it.next().unwrap();
        let w = it.next().unwrap();
        let bias = it.next().unwrap();
        m.head = Some((w, bias));
        m
    }

    fn block(&self, x: &[f64], n: usize, b: &[Vec<f64>]) -> Vec<f64> {
        let d = self.d;
        let dh = d / self.heads;
        let a = layer_norm(x, &b[0], &b[1]);
        let mut qkv = mm(&a, &b[2], n, d, 3 * d);
        add_bias(&mut qkv, &b[3]);
        let mut ctx = vec![0.0; n * d];
        for h in 0..self.heads {
            for i in 0..n {
                let q = &qkv[i * 3 * d + h * dh..i * 3 * d + h * dh + dh];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j * 3 * d + d + h * dh..j * 3 * d + d + h * dh + dh];
                        q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for (j, e) in ex.iter().enumerate() {
                    for c in 0..dh {
                        ctx[i * d + h * dh + c] += e / z * qkv[j * 3 * d + 2 * d + h * dh + c];
                    }
                }
            }
        }
        let mut attn = mm(&ctx, &b[4], n, d, d);
        add_bias(&mut attn, &b[5]);
        let hres: Vec<f64> = x.iter().zip(&attn).map(|(u, v)| u + v).collect();
        let c = layer_norm(&hres, &b[6], &b[7]);
        let mut f = mm(&c, &b[8], n, d, 4 * d);
        add_bias(&mut f, &b[9]);
        let f: Vec<f64> = f.into_iter().map(gelu).collect();
        let mut g = mm(&f, &b[10], n, 4 * d, d);
        add_bias(&mut g, &b[11]);
        hres.iter().zip(&g).map(|(u, v)| u + v).collect()
    }

    /// Unit class weight for `class` behind `prompt` (`p×d`, possibly empty).
    pub fn encode(&self, prompt: &[f64], class: usize) -> Vec<f64> {
        let d = self.d;
        let c = self.tokens_per_class;
        let mut x = prompt.to_vec();
        x.extend_from_slice(&self.tokens[class * c * d..(class + 1) * c * d]);
        let n = x.len() / d;
        for (i, v) in x.iter_mut().enumerate() {
            *v += self.pos[i];
        }
        for b in &self.blocks {
            x = self.block(&x, n, b);
        }
        let last = &x[(n - 1) * d..n * d];
        unit(&mm(last, &self.proj, 1, d, self.e))
    }

    fn image_embedding(&self, row: &[f64]) -> Vec<f64> {
        match &self.head {
            None => row.to_vec(),
            Some((w, b)) => {
                let mut z = mm(row, w, 1, self.e, self.e);
                add_bias(&mut z, b);
                unit(&z)
            }
        }
    }

    /// `[batch][k]` logits `cos / τ`.
    pub fn logits(&self, prompt: &[f64], features: &[f64], tau: f64) -> Vec<Vec<f64>> {
        let w: Vec<Vec<f64>> = (0..self.classes).map(|c| self.encode(prompt, c)).collect();
        features
            .chunks(self.e)
            .map(|row| {
                let z = self.image_embedding(row);
                w.iter().map(|wc| wc.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / tau).collect()
            })
            .collect()
    }

    pub fn loss(&self, prompt: &[f64], features: &[f64], labels: &[u32], tau: f64) -> f64 {
        let logits = self.logits(prompt, features, tau);
        let mut total = 0.0;
        for (row, &l) in logits.iter().zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[l as usize];
        }
        total / labels.len() as f64
    }
}

/// Central differences of `f` at `x` with step `eps`.
pub fn numeric_grad(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, 0 when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

pub fn f64s(v: &[f32]) -> Vec<f64> {
    to64(v)
}

/// Checks every structural invariant of `spec`; returns a description of the first violation.
pub fn violations(spec: &PartitionSpec, labels: &[u32], k: usize) -> Option<String> {
    let mut seen = BTreeSet::new();
    for (c, rows) in spec.assignment.iter().enumerate() {
        for &i in rows {
            if i >= labels.len() {
                return Some(format!("client {c} holds invalid index {i}"));
            }
            if !seen.insert(i) {
                return Some(format!("index {i} assigned twice"));
            }
        }
    }
    let holders = spec.class_clients(labels);
    if let Some(s) = spec.shots_per_class {
        let held_everywhere = !matches!(spec.regime, Regime::RandomClasses { .. });
        for class in 0..k {
            let total: usize =
                spec.assignment.iter().map(|a| a.iter().filter(|&&i| labels[i] as usize == class).count()).sum();
            if held_everywhere && total != s {
                return Some(format!("class {class} contributes {total} samples, expected {s}"));
            }
        }
    }
    match spec.regime {
        Regime::ExtremeNonIid => {
            if let Some(c) = holders.iter().position(|h| h.len() > 1) {
                return Some(format!("class {c} appears on clients {:?}", holders[c]));
            }
        }
        Regime::Overlap { ratio } => {
            let expected = (ratio * k as f64).round() as usize;
            let multi: Vec<usize> = (0..k).filter(|&c| holders[c].len() > 1).collect();
            if multi.len() != expected {
                return Some(format!("{} shared classes, expected {expected}", multi.len()));
            }
            if multi != spec.shared_classes {
                return Some("shared class list disagrees with the assignment".into());
            }
            if multi.iter().any(|&c| holders[c].len() != 2) {
                return Some("a shared class spans more than two clients".into());
            }
        }
        Regime::Iid => {
            for class in 0..k as u32 {
                let counts: Vec<usize> =
                    spec.assignment.iter().map(|a| a.iter().filter(|&&i| labels[i] == class).count()).collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                if hi - lo > 1 {
                    return Some(format!("class {class} is uneven across clients: {counts:?}"));
                }
            }
        }
        Regime::RandomClasses { .. } => {}
    }
    None
}
