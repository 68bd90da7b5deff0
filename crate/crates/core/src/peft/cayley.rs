//! Cayley parameterization of orthogonal blocks: `R = (I + S)(I − S)⁻¹` for
//! skew-symmetric `S`, stored as its strict upper triangle.

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

use super::PeftError;

/// Number of free parameters of an `r × r` skew-symmetric block.
pub fn skew_params(r: usize) -> usize {
    r * (r - 1) / 2
}

/// Expands a strict upper triangle (row-major) into a full skew matrix.
pub fn skew_from_upper(p: &[f64], r: usize) -> Vec<f64> {
    assert_eq!(p.len(), skew_params(r));
    let mut s = vec![0.0; r * r];
    let mut it = p.iter();
    for i in 0..r {
        for j in i + 1..r {
            let v = *it.next().unwrap();
            s[i * r + j] = v;
            s[j * r + i] = -v;
        }
    }
    s
}

fn matmul(a: &[f64], b: &[f64], r: usize) -> Vec<f64> {
    let mut c = vec![0.0; r * r];
    for i in 0..r {
        for k in 0..r {
            let aik = a[i * r + k];
            for j in 0..r {
                c[i * r + j] += aik * b[k * r + j];
            }
        }
    }
    c
}

fn transpose(a: &[f64], r: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            t[j * r + i] = a[i * r + j];
        }
    }
    t
}

/// Inverse by LU decomposition with partial pivoting.
fn invert(m: &[f64], r: usize) -> Result<Vec<f64>, PeftError> {
    let mut a = m.to_vec();
    let mut perm: Vec<usize> = (0..r).collect();
    for col in 0..r {
        let piv = (col..r)
            .max_by(|&x, &y| a[x * r + col].abs().total_cmp(&a[y * r + col].abs()))
            .unwrap();
        if a[piv * r + col].abs() < 1e-12 {
            return Err(PeftError::Singular);
        }
        if piv != col {
            for j in 0..r {
                a.swap(piv * r + j, col * r + j);
            }
            perm.swap(piv, col);
        }
        let d = a[col * r + col];
        for i in col + 1..r {
            let f = a[i * r + col] / d;
            a[i * r + col] = f;
            for j in col + 1..r {
                a[i * r + j] -= f * a[col * r + j];
            }
        }
    }
    let mut inv = vec![0.0; r * r];
    for c in 0..r {
        // solve L U x = P e_c
        let mut x: Vec<f64> = perm.iter().map(|&p| if p == c { 1.0 } else { 0.0 }).collect();
        for i in 0..r {
            for k in 0..i {
                x[i] -= a[i * r + k] * x[k];
            }
        }
        for i in (0..r).rev() {
            for k in i + 1..r {
                x[i] -= a[i * r + k] * x[k];
            }
            x[i] /= a[i * r + i];
        }
        for i in 0..r {
            inv[i * r + c] = x[i];
        }
    }
    Ok(inv)
}

/// Returns `(R, (I − S)⁻¹)` for a full skew matrix `s`.
fn cayley_full(s: &[f64], r: usize) -> Result<(Vec<f64>, Vec<f64>), PeftError> {
    let mut plus = s.to_vec();
    let mut minus: Vec<f64> = s.iter().map(|v| -v).collect();
    for i in 0..r {
        plus[i * r + i] += 1.0;
        minus[i * r + i] += 1.0;
    }
    let inv = invert(&minus, r)?;
    Ok((matmul(&plus, &inv, r), inv))
}

/// Orthogonal `r × r` matrix from the upper-triangle parameters `p`.
pub fn cayley(p: &[f64], r: usize) -> Result<Vec<f64>, PeftError> {
    Ok(cayley_full(&skew_from_upper(p, r), r)?.0)
}

/// `max |RᵀR − I|` over all entries.
pub fn orthogonality_error(rm: &[f64], r: usize) -> f64 {
    let rtr = matmul(&transpose(rm, r), rm, r);
    (0..r * r)
        .map(|i| (rtr[i] - if i / r == i % r { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// Block-diagonal orthogonal matrix from `p` of shape `blocks × r(r−1)/2`.
///
/// The output is `(blocks·r) × (blocks·r)` and is differentiable with
/// respect to `p`: for one block with output gradient `G`,
/// `∂L/∂S = (I + R)ᵀ G (I − S)⁻ᵀ` and each parameter collects
/// `∂L/∂S_ij − ∂L/∂S_ji`.
pub fn cayley_blocks<T: Real>(tape: &mut Tape<T>, p: Var, r: usize) -> Result<Var, PeftError> {
    let s = tape.shape(p).to_vec();
    let np = skew_params(r);
    if s.len() != 2 || s[1] != np {
        return Err(TensorError::ShapeMismatch { op: "cayley", lhs: s, rhs: vec![0, np] }.into());
    }
    let blocks = s[0];
    let n = blocks * r;
    let pv: Vec<f64> = tape.value(p).data().iter().map(|v| v.as_f64()).collect();
    let mut out = vec![T::zero(); n * n];
    let mut saved = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let (rm, inv) = cayley_full(&skew_from_upper(&pv[b * np..(b + 1) * np], r), r)?;
        for i in 0..r {
            for j in 0..r {
                out[(b * r + i) * n + b * r + j] = T::of(rm[i * r + j]);
            }
        }
        saved.push((rm, inv));
    }
    let value = Tensor::new(&[n, n], out)?;
    let var = tape.record(
        "cayley",
        &[p],
        value,
        Box::new(move |g, _, _, _| {
            let mut gp = Vec::with_capacity(blocks * np);
            for (b, (rm, inv)) in saved.iter().enumerate() {
                let gb: Vec<f64> = (0..r * r)
                    .map(|e| g[(b * r + e / r) * n + b * r + e % r].as_f64())
                    .collect();
                let mut ipr = rm.clone();
                for i in 0..r {
                    ipr[i * r + i] += 1.0;
                }
                let ds = matmul(&matmul(&transpose(&ipr, r), &gb, r), &transpose(inv, r), r);
                for i in 0..r {
                    for j in i + 1..r {
                        gp.push(T::of(ds[i * r + j] - ds[j * r + i]));
                    }
                }
            }
            vec![Some(gp)]
        }),
    )?;
    Ok(var)
}
