use super::{invalid, Real, Result, Tape, TensorError, Var};

/// Multi-head scaled dot-product attention over `B × N × D` inputs.
///
/// Each of the `heads` heads computes `softmax(Q Kᵀ / √d) V` with head width
/// `d = D / heads`. `kv_scales`, when given, are per-dimension vectors of
/// length `D` multiplied into K and V before use. Returns the `B × N × D`
/// output and the `B × heads × N × N` attention weights.
pub fn scaled_dot_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    kv_scales: Option<(Var, Var)>,
) -> Result<(Var, Var)> {
    let s = tape.shape(q).to_vec();
    for other in [k, v] {
        if tape.shape(other) != s.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: s,
                rhs: tape.shape(other).to_vec(),
            });
        }
    }
    if s.len() != 3 {
        return Err(invalid("attention", format!("expected B×N×D, got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(invalid("attention", format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    if dh == 0 {
        return Err(invalid("attention", "head dimension is zero"));
    }
    let (k, v) = match kv_scales {
        Some((lk, lv)) => {
            let lk = tape.reshape(lk, &[1, 1, d])?;
            let lv = tape.reshape(lv, &[1, 1, d])?;
            (tape.mul(k, lk)?, tape.mul(v, lv)?)
        }
        None => (k, v),
    };
    let split = [b, n, heads, dh];
    let qh = tape.reshape(q, &split)?;
    let qh = tape.permute(qh, &[0, 2, 1, 3])?;
    let kh = tape.reshape(k, &split)?;
    let kt = tape.permute(kh, &[0, 2, 3, 1])?;
    let vh = tape.reshape(v, &split)?;
    let vh = tape.permute(vh, &[0, 2, 1, 3])?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, T::one() / T::of(dh as f64).sqrt())?;
    let weights = tape.softmax(scores, 3)?;
    let out = tape.matmul(weights, vh)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[b, n, d])?;
    Ok((out, weights))
}
