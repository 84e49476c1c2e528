//! Training objective: projection matching (CMPM), projection
//! classification (CMPC), the per-head part alignment sum, the head
//! diversity penalty and their weighted total.
//!
//! CMPM, direction X→Z, for a batch of `n` pairs:
//!
//! ```text
//! p[i][j] = softmax_j(x_i · z̄_j)            z̄_j = z_j / ‖z_j‖
//! q[i][j] = y[i][j] / Σ_k y[i][k]            y[i][j] = [label_i == label_j]
//! L(X→Z)  = (1/n) Σ_i Σ_j p[i][j] · ln(p[i][j] / (q[i][j] + ε))
//! ```
//!
//! and `cmpm = L(X→Z) + L(Z→X)`. CMPC classifies `x̂_i = (x_i · z̄_i) z̄_i`
//! (and symmetrically `ẑ_i`) against row-normalized classifier weights.

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor, Var, NORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub num_identities: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-8,
            lambda: 0.2,
            num_identities: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.num_identities == 0 {
            return Err(Error::Config("num_identities must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_pair<T: Real>(x: &Var<'_, T>, z: &Var<'_, T>, labels: &[usize]) -> Result<()> {
    let (xs, zs) = (x.shape(), z.shape());
    if xs != zs || xs.len() != 2 {
        return Err(Error::Shape(format!("embedding batches {xs:?} and {zs:?} differ")));
    }
    if labels.len() != xs[0] {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            xs[0]
        )));
    }
    Ok(())
}

/// `ln(q + ε)` for the identity-matching target distribution.
fn log_target<T: Real>(labels: &[usize], eps: f64) -> Tensor<T> {
    let n = labels.len();
    let mut data = Vec::with_capacity(n * n);
    for &li in labels {
        let matches = labels.iter().filter(|&&lj| lj == li).count() as f64;
        data.extend(labels.iter().map(|&lj| {
            let q = if lj == li { 1.0 / matches } else { 0.0 };
            T::of((q + eps).ln())
        }));
    }
    Tensor::new(vec![n, n], data).expect("n×n target")
}

fn matching_direction<'t, T: Real>(
    query: Var<'t, T>,
    target: Var<'t, T>,
    log_q: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let n = T::of(query.rows() as f64);
    let logits = query.matmul_t(target.normalize_rows(T::of(NORM_EPS)))?;
    let log_p = logits.log_softmax_rows()?;
    let p = log_p.exp();
    let kl = p.mul(log_p)?.sum().sub(p.mul_const(log_q)?.sum())?;
    Ok(kl.scale(T::one() / n))
}

/// Bidirectional cross-modal projection matching loss.
pub fn cmpm<'t, T: Real>(x: Var<'t, T>, z: Var<'t, T>, labels: &[usize], eps: f64) -> Result<Var<'t, T>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("CMPM epsilon must be > 0, got {eps}")));
    }
    check_pair(&x, &z, labels)?;
    let log_q = log_target(labels, eps);
    matching_direction(x, z, &log_q)?.add(matching_direction(z, x, &log_q)?)
}

fn projection_ce<'t, T: Real>(
    x: Var<'t, T>,
    onto: Var<'t, T>,
    weights_normed: Var<'t, T>,
    labels: &[usize],
) -> Result<Var<'t, T>> {
    let dir = onto.normalize_rows(T::of(NORM_EPS));
    let projected = dir.mul_col(x.row_dot(dir)?)?;
    let log_probs = projected.matmul_t(weights_normed)?.log_softmax_rows()?;
    Ok(log_probs.pick_per_row(labels)?.mean().scale(-T::one()))
}

/// Bidirectional cross-modal projection classification loss. `classifier`
/// is `num_identities × d`; its rows are normalized before use.
pub fn cmpc<'t, T: Real>(
    x: Var<'t, T>,
    z: Var<'t, T>,
    labels: &[usize],
    classifier: Var<'t, T>,
) -> Result<Var<'t, T>> {
    check_pair(&x, &z, labels)?;
    let (classes, width) = (classifier.rows(), classifier.cols());
    if width != x.cols() {
        return Err(Error::Shape(format!(
            "classifier width {width} vs embedding width {}",
            x.cols()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside {classes} identities")));
    }
    let w = classifier.normalize_rows(T::of(NORM_EPS));
    projection_ce(x, z, w, labels)?.add(projection_ce(z, x, w, labels)?)
}

/// Σ_k [cmpm(E_k, T_k) + cmpc(E_k, T_k, W_k)] over the K part slots.
pub fn part_alignment_loss<'t, T: Real>(
    parts_visual: &[Var<'t, T>],
    parts_textual: &[Var<'t, T>],
    labels: &[usize],
    classifiers: &[Var<'t, T>],
    eps: f64,
) -> Result<Var<'t, T>> {
    let k = parts_visual.len();
    if k == 0 || parts_textual.len() != k || classifiers.len() != k {
        return Err(Error::Shape(format!(
            "part slots: {k} visual, {} textual, {} classifiers",
            parts_textual.len(),
            classifiers.len()
        )));
    }
    let mut total: Option<Var<'t, T>> = None;
    for ((&v, &t), &w) in parts_visual.iter().zip(parts_textual).zip(classifiers) {
        let term = cmpm(v, t, labels, eps)?.add(cmpc(v, t, labels, w)?)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("k >= 1"))
}

/// Mean cosine over ordered pairs of distinct heads, summed over both
/// modalities, for one sample. Each input is `K×d`.
pub fn diversity_loss<'t, T: Real>(visual: Var<'t, T>, textual: Var<'t, T>) -> Result<Var<'t, T>> {
    let (vs, ts) = (visual.shape(), textual.shape());
    if vs != ts || vs.len() != 2 {
        return Err(Error::Shape(format!("head embeddings {vs:?} and {ts:?} differ")));
    }
    let k = vs[0];
    if k < 2 {
        return Err(Error::Config(format!("diversity loss needs K >= 2, got {k}")));
    }
    let mut off_diag = Tensor::full(&[k, k], T::one());
    for i in 0..k {
        off_diag.data_mut()[i * k + i] = T::zero();
    }
    let pair_cos = |e: Var<'t, T>| -> Result<Var<'t, T>> {
        let n = e.normalize_rows(T::of(NORM_EPS));
        Ok(n.matmul_t(n)?.mul_const(&off_diag)?.sum())
    };
    let denom = T::of((k * (k - 1)) as f64);
    Ok(pair_cos(visual)?.add(pair_cos(textual)?)?.scale(T::one() / denom))
}

/// Loss value with its components, for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t, T: Real> {
    pub total: Var<'t, T>,
    pub global: f64,
    pub part: f64,
    pub diversity: f64,
}

impl<T: Real> LossTerms<'_, T> {
    /// `step=<i> L=<f> Lg=<f> Lp=<f> Ldiv=<f>`
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} L={:.6} Lg={:.6} Lp={:.6} Ldiv={:.6}",
            self.total.item().f64(),
            self.global,
            self.part,
            self.diversity
        )
    }
}

/// Parsed form of a [`LossTerms::log_line`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub total: f64,
    pub global: f64,
    pub part: f64,
    pub diversity: f64,
}

impl std::str::FromStr for LogRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = [None; 5];
        for kv in line.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed log field {kv:?}")))?;
            let slot = match k {
                "step" => 0,
                "L" => 1,
                "Lg" => 2,
                "Lp" => 3,
                "Ldiv" => 4,
                _ => return Err(Error::Data(format!("unknown log key {k:?}"))),
            };
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Data(format!("bad number in log field {kv:?}")))?;
            fields[slot] = Some(v);
        }
        let get = |i: usize| fields[i].ok_or_else(|| Error::Data(format!("log line missing field: {line}")));
        Ok(LogRecord {
            step: get(0)? as usize,
            total: get(1)?,
            global: get(2)?,
            part: get(3)?,
            diversity: get(4)?,
        })
    }
}

/// `L = L_global + L_part + λ·L_div`.
///
/// `heads_visual[s]` / `heads_textual[s]` are the `K×d` part embeddings of
/// sample `s`. `classifiers[0]` serves the global slot and
/// `classifiers[1..=K]` the part slots. The diversity term is the batch
/// mean of the per-sample penalty; with `K < 2` it is reported as 0 and
/// `λ` must be 0.
pub fn total_loss<'t, T: Real>(
    global_visual: Var<'t, T>,
    global_textual: Var<'t, T>,
    heads_visual: &[Var<'t, T>],
    heads_textual: &[Var<'t, T>],
    labels: &[usize],
    cfg: &LossConfig,
    classifiers: &[Var<'t, T>],
) -> Result<LossTerms<'t, T>> {
    cfg.validate()?;
    let n = labels.len();
    if heads_visual.len() != n || heads_textual.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "{} visual and {} textual head sets for {n} labels",
            heads_visual.len(),
            heads_textual.len()
        )));
    }
    let k = heads_visual[0].rows();
    if classifiers.len() != k + 1 {
        return Err(Error::Shape(format!(
            "{} classifiers for K={k} part slots plus the global slot",
            classifiers.len()
        )));
    }
    if k < 2 && cfg.lambda > 0.0 {
        return Err(Error::Config(format!(
            "lambda={} needs K >= 2 heads for the diversity term",
            cfg.lambda
        )));
    }

    let global = cmpm(global_visual, global_textual, labels, cfg.epsilon)?
        .add(cmpc(global_visual, global_textual, labels, classifiers[0])?)?;

    let all_v = Var::concat_rows(heads_visual)?;
    let all_t = Var::concat_rows(heads_textual)?;
    if all_v.rows() != n * k || all_t.rows() != n * k {
        return Err(Error::Shape("samples disagree on the number of heads".into()));
    }
    let mut slots_v = Vec::with_capacity(k);
    let mut slots_t = Vec::with_capacity(k);
    for slot in 0..k {
        let idx: Vec<usize> = (0..n).map(|s| s * k + slot).collect();
        slots_v.push(all_v.select_rows(&idx)?);
        slots_t.push(all_t.select_rows(&idx)?);
    }
    let part = part_alignment_loss(&slots_v, &slots_t, labels, &classifiers[1..], cfg.epsilon)?;

    let mut total = global.add(part)?;
    let mut diversity = 0.0;
    if k >= 2 {
        let mut terms = Vec::with_capacity(n);
        for (&v, &t) in heads_visual.iter().zip(heads_textual) {
            terms.push(diversity_loss(v, t)?);
        }
        let div = Var::concat_rows(&terms)?.mean();
        diversity = div.item().f64();
        if cfg.lambda > 0.0 {
            total = total.add(div.scale(T::of(cfg.lambda)))?;
        }
    }
    Ok(LossTerms {
        total,
        global: global.item().f64(),
        part: part.item().f64(),
        diversity,
    })
}
