//! Desk-scale metrics: Fréchet distance over chunk embeddings, class-probe
//! KL and inception score, an energy cross-correlation offset, and a
//! cross-modal cosine score.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{clean_class_chunk, Episode, LATENT_DIM, N_CLASSES, SEMANTIC_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal, seeded};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
/// Autocorrelation lags per channel fed to the embedder.
pub const EMBED_LAGS: usize = 8;
pub const DEFAULT_CHUNK_LEN: usize = 32;
pub const POSTERIOR_FLOOR: f64 = 1e-8;
/// Eigenvalues above `-PSD_TOL` are clamped to zero.
pub const PSD_TOL: f64 = 1e-8;
const MIN_PROBE_ACCURACY: f64 = 0.95;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL {
            return Err(Error::NotPsd(*v));
        }
        *v = libm::sqrt(v.max(0.0));
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn trace_sqrt(m: &DMatrix<f64>) -> Result<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut t = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOL {
            return Err(Error::NotPsd(v));
        }
        t += libm::sqrt(v.max(0.0));
    }
    Ok(t)
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_distance(mu1: &[f64], sigma1: &Tensor, mu2: &[f64], sigma2: &Tensor) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.shape() != [d, d] || sigma2.shape() != [d, d] {
        return Err(Error::shape("frechet_distance", sigma1.shape(), sigma2.shape()));
    }
    let s1 = to_matrix(sigma1);
    let s2 = to_matrix(sigma2);
    for (s, which) in [(&s1, 1), (&s2, 2)] {
        if (s - s.transpose()).amax() > 1e-12 * (1.0 + s.amax()) {
            return Err(Error::Invalid(alloc::format!("frechet_distance: sigma{which} is not symmetric")));
        }
    }
    let r1 = psd_sqrt(&s1)?;
    let mid = &r1 * &s2 * &r1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross = trace_sqrt(&mid)?;
    let mean: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((mean + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Mean and unbiased covariance (zero for a single sample).
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<(Vec<f64>, Tensor)> {
    let n = features.len();
    let Some(first) = features.first() else {
        return Err(Error::invalid("gaussian_stats: no features"));
    };
    let d = first.len();
    let mut mu = vec![0.0; d];
    for f in features {
        if f.len() != d {
            return Err(Error::invalid("gaussian_stats: ragged features"));
        }
        for (m, x) in mu.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = Tensor::zeros(&[d, d]);
    if n > 1 {
        for f in features {
            for i in 0..d {
                let a = f[i] - mu[i];
                for j in 0..d {
                    let v = cov.get(i, j) + a * (f[j] - mu[j]);
                    cov.set(i, j, v);
                }
            }
        }
        for v in cov.data_mut() {
            *v /= (n - 1) as f64;
        }
    }
    Ok((mu, cov))
}

/// Fixed random-projection embedder over per-channel autocorrelations.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub seed: u64,
    /// `(LATENT_DIM·EMBED_LAGS) × EMBED_DIM`.
    pub projection: Tensor,
}

impl Embedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let fan_in = LATENT_DIM * EMBED_LAGS;
        let std = 4.0 / libm::sqrt(fan_in as f64);
        let data = (0..fan_in * EMBED_DIM).map(|_| std * normal(&mut rng)).collect();
        Self {
            seed,
            projection: Tensor::from_vec(fan_in, EMBED_DIM, data),
        }
    }

    /// Shift-invariant summary of one chunk: `a_d(τ) = mean_t x[t,d]·x[t+τ,d]`.
    pub fn summary(chunk: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = chunk.dims2();
        if d != LATENT_DIM || n == 0 {
            return Err(Error::shape("embedder", chunk.shape(), &[n.max(1), LATENT_DIM]));
        }
        let mut out = vec![0.0; LATENT_DIM * EMBED_LAGS];
        for c in 0..LATENT_DIM {
            for lag in 0..EMBED_LAGS.min(n) {
                let s: f64 = (0..n - lag).map(|t| chunk.get(t, c) * chunk.get(t + lag, c)).sum();
                out[c * EMBED_LAGS + lag] = s / (n - lag) as f64;
            }
        }
        Ok(out)
    }

    pub fn embed(&self, chunk: &Tensor) -> Result<Vec<f64>> {
        let s = Self::summary(chunk)?;
        let row = Tensor::row_vector(&s).matmul(&self.projection)?;
        Ok(row.data().iter().map(|&x| libm::tanh(x)).collect())
    }
}

/// Non-overlapping chunks of `chunk_len` frames, the partial tail dropped.
pub fn split_chunks(audio: &Tensor, chunk_len: usize) -> Result<Vec<Tensor>> {
    if chunk_len == 0 {
        return Err(Error::invalid("chunk_len must be at least 1"));
    }
    let l = audio.rows();
    if l < chunk_len {
        return Err(Error::Invalid(alloc::format!("sequence of {l} frames is shorter than one chunk of {chunk_len}")));
    }
    (0..l / chunk_len).map(|k| audio.slice_rows(k * chunk_len, chunk_len)).collect()
}

pub fn embed_chunks(audio: &Tensor, chunk_len: usize, embedder: &Embedder) -> Result<Vec<Vec<f64>>> {
    split_chunks(audio, chunk_len)?.iter().map(|c| embedder.embed(c)).collect()
}

fn clean_reference(seed: u64, embedder: &Embedder, chunk_len: usize, per_class: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(N_CLASSES * per_class);
    for k in 0..N_CLASSES * per_class {
        let class = k % N_CLASSES;
        out.push((class, embedder.embed(&clean_class_chunk(&mut rng, class, chunk_len))?));
    }
    Ok(out)
}

fn centroids(samples: &[(usize, Vec<f64>)]) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; EMBED_DIM]; N_CLASSES];
    let mut n = [0usize; N_CLASSES];
    for (k, f) in samples {
        n[*k] += 1;
        for (a, b) in c[*k].iter_mut().zip(f) {
            *a += b;
        }
    }
    for (row, &cnt) in c.iter_mut().zip(&n) {
        for a in row {
            *a /= cnt.max(1) as f64;
        }
    }
    c
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn nearest_centroid(centroids: &[Vec<f64>], f: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..centroids.len() {
        if sq_dist(&centroids[k], f) < sq_dist(&centroids[best], f) {
            best = k;
        }
    }
    best
}

/// Softmax-regression class probe over embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// `EMBED_DIM × N_CLASSES`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl Probe {
    /// Full-batch gradient descent on the cross-entropy.
    pub fn fit(samples: &[(usize, Vec<f64>)], iterations: usize, lr: f64) -> Self {
        let mut w = Tensor::zeros(&[EMBED_DIM, N_CLASSES]);
        let mut b = vec![0.0; N_CLASSES];
        let n = samples.len() as f64;
        for _ in 0..iterations {
            let mut gw = Tensor::zeros(&[EMBED_DIM, N_CLASSES]);
            let mut gb = vec![0.0; N_CLASSES];
            let probe = Probe { weights: w.clone(), bias: b.clone() };
            for (k, f) in samples {
                let p = probe.posterior(f);
                for c in 0..N_CLASSES {
                    let d = p[c] - if c == *k { 1.0 } else { 0.0 };
                    gb[c] += d / n;
                    for (i, x) in f.iter().enumerate() {
                        let v = gw.get(i, c) + d * x / n;
                        gw.set(i, c, v);
                    }
                }
            }
            for (a, g) in w.data_mut().iter_mut().zip(gw.data()) {
                *a -= lr * g;
            }
            for (a, g) in b.iter_mut().zip(&gb) {
                *a -= lr * g;
            }
        }
        Probe { weights: w, bias: b }
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        (0..N_CLASSES)
            .map(|c| self.bias[c] + f.iter().enumerate().map(|(i, x)| x * self.weights.get(i, c)).sum::<f64>())
            .collect()
    }

    pub fn posterior(&self, f: &[f64]) -> Vec<f64> {
        softmax(&self.logits(f))
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| libm::exp(x - m)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn floored(p: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = p.iter().map(|x| x.max(POSTERIOR_FLOOR)).collect();
    let s: f64 = q.iter().sum();
    q.iter().map(|x| x / s).collect()
}

/// `KL(p ‖ q)` after flooring both at [`POSTERIOR_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (floored(p), floored(q));
    p.iter().zip(&q).map(|(a, b)| a * libm::log(a / b)).sum::<f64>().max(0.0)
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))`.
pub fn inception_score(posteriors: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = posteriors.first() else {
        return Err(Error::invalid("inception_score: no samples"));
    };
    let mut marginal = vec![0.0; first.len()];
    for p in posteriors {
        for (m, x) in marginal.iter_mut().zip(floored(p)) {
            *m += x / posteriors.len() as f64;
        }
    }
    let mean_kl: f64 = posteriors.iter().map(|p| kl_divergence(p, &marginal)).sum::<f64>() / posteriors.len() as f64;
    Ok(libm::exp(mean_kl))
}

/// Everything the metrics need, derived deterministically from one seed.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub chunk_len: usize,
    pub embedder: Embedder,
    pub probe: Probe,
    pub centroids: Vec<Vec<f64>>,
    /// Mean of the class centroids; both sides of the cross-modal score are
    /// centered on it.
    pub center: Vec<f64>,
    /// Probe accuracy and nearest-centroid accuracy on held-out clean chunks.
    pub probe_accuracy: f64,
    pub centroid_accuracy: f64,
}

impl EvalContext {
    /// Re-seeds the embedder until nearest-centroid accuracy on held-out
    /// clean class chunks reaches 95%.
    pub fn new(seed: u64, chunk_len: usize) -> Result<Self> {
        if chunk_len == 0 {
            return Err(Error::invalid("chunk_len must be at least 1"));
        }
        for attempt in 0..16u64 {
            let embedder = Embedder::new(derive_seed(&[seed, attempt]));
            let train = clean_reference(derive_seed(&[seed, attempt, 1]), &embedder, chunk_len, 24)?;
            let held = clean_reference(derive_seed(&[seed, attempt, 2]), &embedder, chunk_len, 16)?;
            let cents = centroids(&train);
            let acc = |pred: &dyn Fn(&[f64]) -> usize| held.iter().filter(|(k, f)| pred(f) == *k).count() as f64 / held.len() as f64;
            let centroid_accuracy = acc(&|f| nearest_centroid(&cents, f));
            if centroid_accuracy < MIN_PROBE_ACCURACY {
                continue;
            }
            let probe = Probe::fit(&train, 300, 1.0);
            let probe_accuracy = acc(&|f| argmax(&probe.posterior(f)));
            let mut center = vec![0.0; EMBED_DIM];
            for c in &cents {
                for (a, b) in center.iter_mut().zip(c) {
                    *a += b / N_CLASSES as f64;
                }
            }
            return Ok(Self {
                chunk_len,
                embedder,
                probe,
                centroids: cents,
                center,
                probe_accuracy,
                centroid_accuracy,
            });
        }
        Err(Error::invalid("no embedder seed separates the classes"))
    }

    pub fn embed(&self, audio: &Tensor) -> Result<Vec<Vec<f64>>> {
        embed_chunks(audio, self.chunk_len, &self.embedder)
    }

    /// Paired chunk KL of reference against generated posteriors, and the
    /// inception score of the generated chunks.
    pub fn kl_and_isc(&self, gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<(f64, f64)> {
        let n = gen.len().min(reference.len());
        if n == 0 {
            return Err(Error::invalid("kl_and_isc: no chunks"));
        }
        let pg: Vec<Vec<f64>> = gen.iter().map(|f| self.probe.posterior(f)).collect();
        let kl = (0..n).map(|i| kl_divergence(&self.probe.posterior(&reference[i]), &pg[i])).sum::<f64>() / n as f64;
        Ok((kl, inception_score(&pg)?))
    }

    /// Cosine between the centered pooled audio embedding and the class
    /// content of the semantic stream mapped onto the class centroids.
    pub fn ib_analog(&self, gen: &Tensor, episode: &Episode) -> Result<f64> {
        let feats = self.embed(gen)?;
        let mut audio = vec![0.0; EMBED_DIM];
        for f in &feats {
            for ((a, x), c) in audio.iter_mut().zip(f).zip(&self.center) {
                *a += (x - c) / feats.len() as f64;
            }
        }
        let weights = episode.semantic.mean_rows();
        if weights.cols() != SEMANTIC_DIM {
            return Err(Error::shape("ib_analog", weights.shape(), &[1, SEMANTIC_DIM]));
        }
        let mut cond = vec![0.0; EMBED_DIM];
        for (k, cent) in self.centroids.iter().enumerate() {
            let w = weights.data()[k];
            for ((a, x), c) in cond.iter_mut().zip(cent).zip(&self.center) {
                *a += w * (x - c);
            }
        }
        Ok(cosine(&audio, &cond))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity; 0 when either norm vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// Per-frame energy `Σ_d x²`.
pub fn energy_envelope(audio: &Tensor) -> Vec<f64> {
    (0..audio.rows()).map(|i| audio.row(i).iter().map(|x| x * x).sum()).collect()
}

fn centered(v: &[f64], op: &'static str) -> Result<Vec<f64>> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - m).collect();
    if c.iter().all(|x| x.abs() < 1e-15) {
        return Err(Error::Invalid(alloc::format!("{op}: constant envelope")));
    }
    Ok(c)
}

/// Signed lag in `[-L/4, L/4]` maximizing the circular cross-correlation
/// `Σ_i gen[i]·reference[i − lag]` of the centered envelopes. Ties go to the
/// smaller |lag|, then to the positive one.
pub fn best_lag(gen: &[f64], reference: &[f64]) -> Result<i64> {
    let l = gen.len();
    if l == 0 || reference.len() != l {
        return Err(Error::shape("best_lag", &[gen.len()], &[reference.len()]));
    }
    let g = centered(gen, "desync(generated)")?;
    let r = centered(reference, "desync(reference)")?;
    let max_lag = (l / 4) as i64;
    let corr = |lag: i64| -> f64 {
        (0..l)
            .map(|i| {
                let j = (i as i64 - lag).rem_euclid(l as i64) as usize;
                g[i] * r[j]
            })
            .sum()
    };
    let mut best = (0i64, corr(0));
    for k in 1..=max_lag {
        for lag in [k, -k] {
            let c = corr(lag);
            if c > best.1 {
                best = (lag, c);
            }
        }
    }
    Ok(best.0)
}

/// Frames of offset between generated energy and the episode's event envelope.
pub fn desync_analog(gen: &Tensor, episode: &Episode) -> Result<f64> {
    if gen.rows() != episode.len() {
        return Err(Error::shape("desync_analog", gen.shape(), episode.audio.shape()));
    }
    Ok(best_lag(&energy_envelope(gen), &episode.envelope())?.unsigned_abs() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub fd: f64,
    pub kl: f64,
    pub isc: f64,
    pub ib_analog: f64,
    pub desync_frames: f64,
}

/// Scores generated latents against their episodes. Chunk features are
/// pooled across the split for FD and IS; the rest are per-episode means.
pub fn evaluate(ctx: &EvalContext, generated: &[Tensor], episodes: &[Episode]) -> Result<MetricReport> {
    if generated.is_empty() || generated.len() != episodes.len() {
        return Err(Error::invalid("evaluate: need one generated latent per episode"));
    }
    let mut gen_feats = Vec::new();
    let mut ref_feats = Vec::new();
    let mut ib = 0.0;
    let mut desync = 0.0;
    for (g, e) in generated.iter().zip(episodes) {
        let gf = ctx.embed(g)?;
        let rf = ctx.embed(&e.audio)?;
        if gf.len() != rf.len() {
            return Err(Error::shape("evaluate", g.shape(), e.audio.shape()));
        }
        gen_feats.extend(gf);
        ref_feats.extend(rf);
        ib += ctx.ib_analog(g, e)?;
        desync += desync_analog(g, e)?;
    }
    let n = episodes.len() as f64;
    let (mg, sg) = gaussian_stats(&gen_feats)?;
    let (mr, sr) = gaussian_stats(&ref_feats)?;
    let (kl, isc) = ctx.kl_and_isc(&gen_feats, &ref_feats)?;
    Ok(MetricReport {
        fd: frechet_distance(&mg, &sg, &mr, &sr)?,
        kl,
        isc,
        ib_analog: ib / n,
        desync_frames: desync / n,
    })
}
