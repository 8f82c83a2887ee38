//! Conditional interaction terms: one shared predictor per layer evaluated
//! on masked concatenations of feature embeddings.
//!
//! The first affine of the shared predictor acts on `[v_1, .., v_n]` with
//! the slots outside an index set zeroed. Splitting its weight into
//! per-feature blocks `W_i` gives `Σ_{i∈set} v_i·W_i`, so the projected
//! route computes `P_i = v_i·W_i` once per layer and sums the rows selected
//! by each set. It performs the same arithmetic on the same parameters as
//! the literal masked concatenation; the literal route is kept for checks.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::Pass;
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamStore, RegClass};

/// All sorted `k`-subsets of `0..n` in lexicographic order.
pub fn index_sets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Sorts and validates user-supplied index sets of order `k`.
pub fn validate_sets(sets: &[Vec<usize>], n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(sets.len());
    for set in sets {
        let mut s = set.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != k || s.len() != set.len() {
            return Err(Error::Config(format!("index set {set:?} must hold {k} distinct features")));
        }
        if let Some(&i) = s.iter().find(|&&i| i >= n) {
            return Err(Error::FeatureIndex { index: i, n });
        }
        if out.contains(&s) {
            return Err(Error::Config(format!("index set {set:?} is listed twice")));
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Config("no interaction index sets".into()));
    }
    Ok(out)
}

/// Slot mask of one index set over `n` features.
pub fn mask(set: &[usize], n: usize) -> Result<Vec<bool>> {
    let mut m = vec![false; n];
    for &i in set {
        if i >= n {
            return Err(Error::FeatureIndex { index: i, n });
        }
        m[i] = true;
    }
    Ok(m)
}

/// Adds the per-layer shared predictors. Their size depends on `n·hidden`
/// only, never on the number of index sets.
pub fn init_conditional(
    features: usize,
    hidden: usize,
    layers: usize,
    depth: usize,
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    let width = features * hidden;
    for m in 0..layers {
        let out_in = if depth == 2 {
            params.insert(
                format!("conditional.{m}.hidden.weight"),
                uniform_fan_in(rng, &[width, hidden], width),
                RegClass::WeightDecay,
            );
            params.insert(format!("conditional.{m}.hidden.bias"), uniform_fan_in(rng, &[hidden], width), RegClass::None);
            hidden
        } else {
            width
        };
        params.insert(format!("conditional.{m}.out.weight"), Tensor::zeros(&[out_in, 1]), RegClass::WeightDecay);
        params.insert(format!("conditional.{m}.out.bias"), Tensor::zeros(&[1]), RegClass::None);
    }
}

/// How the masked concatenation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Per-feature projections summed by a 0/1 selection matrix.
    Projected,
    /// One explicit masked concatenation per index set.
    Literal,
}

fn selection(sets: &[Vec<usize>], n: usize) -> Tensor {
    let mut sel = Tensor::zeros(&[sets.len(), n]);
    for (k, set) in sets.iter().enumerate() {
        for &i in set {
            sel.data_mut()[k * n + i] = 1.0;
        }
    }
    sel
}

/// `h_m(masked-concat(v_m, set))` for every index set and layer, each
/// `[sets, batch]`.
pub fn conditional_outputs(
    tape: &mut Tape,
    bound: &Bound,
    depth: usize,
    pass: &mut Pass,
    embeddings: &[Var],
    sets: &[Vec<usize>],
    route: Route,
) -> Result<Vec<Var>> {
    embeddings
        .iter()
        .enumerate()
        .map(|(m, &v)| match route {
            Route::Projected => projected(tape, bound, depth, pass, m, v, sets),
            Route::Literal => literal(tape, bound, depth, pass, m, v, sets),
        })
        .collect()
}

fn projected(
    tape: &mut Tape,
    bound: &Bound,
    depth: usize,
    pass: &mut Pass,
    m: usize,
    v: Var,
    sets: &[Vec<usize>],
) -> Result<Var> {
    let [c, b, h] = <[usize; 3]>::try_from(tape.shape(v)).map_err(|_| Error::Shape {
        op: "conditional-predict",
        lhs: tape.shape(v).to_vec(),
        rhs: vec![],
    })?;
    let k = sets.len();
    let sel = tape.constant(selection(sets, c));
    let first = if depth == 2 { "hidden" } else { "out" };
    let w = bound.get(&format!("conditional.{m}.{first}.weight"));
    let width = tape.shape(w)[1];
    let w3 = tape.reshape(w, &[c, h, width])?;
    let p = tape.matmul(v, w3)?;
    let p = tape.reshape(p, &[c, b * width])?;
    let z = tape.matmul(sel, p)?;
    let z = tape.reshape(z, &[k, b, width])?;
    let z = tape.add(z, bound.get(&format!("conditional.{m}.{first}.bias")))?;
    let out = if depth == 2 {
        let z = tape.relu(z);
        let z = pass.dropout(tape, z)?;
        tape.affine(
            z,
            bound.get(&format!("conditional.{m}.out.weight")),
            bound.get(&format!("conditional.{m}.out.bias")),
        )?
    } else {
        z
    };
    tape.reshape(out, &[k, b])
}

fn literal(
    tape: &mut Tape,
    bound: &Bound,
    depth: usize,
    pass: &mut Pass,
    m: usize,
    v: Var,
    sets: &[Vec<usize>],
) -> Result<Var> {
    let (c, b) = (tape.shape(v)[0], tape.shape(v)[1]);
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let x = tape.masked_concat(v, &mask(set, c)?)?;
        let mut z = x;
        if depth == 2 {
            z = tape.affine(
                z,
                bound.get(&format!("conditional.{m}.hidden.weight")),
                bound.get(&format!("conditional.{m}.hidden.bias")),
            )?;
            z = tape.relu(z);
            z = pass.dropout(tape, z)?;
        }
        let y = tape.affine(
            z,
            bound.get(&format!("conditional.{m}.out.weight")),
            bound.get(&format!("conditional.{m}.out.bias")),
        )?;
        rows.push(tape.reshape(y, &[1, b])?);
    }
    tape.concat(&rows, 0)
}
