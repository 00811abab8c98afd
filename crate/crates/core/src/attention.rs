use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// `q` is `[Lq x d]`, `k` and `v` are `[Lk x d]`. Each head sees a contiguous
/// `d / n_heads` slice of the columns and is scaled by `1 / sqrt(d_head)`.
/// Returns the concatenated head outputs `[Lq x d]` and the per-head weight
/// matrices `[Lq x Lk]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(q).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "{n_heads} heads do not divide model dimension {d}"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if n_heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((out, weights))
}
