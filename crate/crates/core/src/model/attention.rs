use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// Scaled dot-product attention over `n_heads` heads.
///
/// `q` is `[Tq, N]`, `k` and `v` are `[Tk, N]`; the result is `[Tq, N]`.
/// When `scores` is given it receives the post-softmax weights laid out as
/// `[H, Tq, Tk]`. The arithmetic is identical with or without it.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    mut scores: Option<&mut [f32]>,
) -> Result<Tensor> {
    let (tq, n) = q.dims2()?;
    let (tk, nk) = k.dims2()?;
    let (tv, nv) = v.dims2()?;
    if nk != n || nv != n || tv != tk {
        return Err(Error::Shape(format!(
            "attention q [{tq},{n}], k [{tk},{nk}], v [{tv},{nv}]"
        )));
    }
    if n_heads == 0 || n % n_heads != 0 {
        return Err(Error::Shape(format!("width {n} not divisible into {n_heads} heads")));
    }
    if let Some(s) = scores.as_deref() {
        if s.len() != n_heads * tq * tk {
            return Err(Error::Shape(format!(
                "score buffer of {} for [{n_heads},{tq},{tk}]",
                s.len()
            )));
        }
    }
    let hd = n / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; tq * n];
    let mut kh = vec![0.0f32; tk * hd];
    let mut vh = vec![0.0f32; tk * hd];
    let mut logits = vec![0.0f32; tk];

    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for j in 0..tk {
            kh[j * hd..(j + 1) * hd].copy_from_slice(&k.row(j)[cols.clone()]);
            vh[j * hd..(j + 1) * hd].copy_from_slice(&v.row(j)[cols.clone()]);
        }
        for i in 0..tq {
            let qi = &q.row(i)[cols.clone()];
            for (l, kj) in logits.iter_mut().zip(kh.chunks_exact(hd)) {
                let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *l = dot * scale;
            }
            softmax_in_place(&mut logits);
            if let Some(s) = scores.as_deref_mut() {
                s[(h * tq + i) * tk..(h * tq + i + 1) * tk].copy_from_slice(&logits);
            }
            let o = &mut out[i * n + h * hd..i * n + (h + 1) * hd];
            for (&p, vj) in logits.iter().zip(vh.chunks_exact(hd)) {
                for (ov, &x) in o.iter_mut().zip(vj) {
                    *ov += p * x;
                }
            }
        }
    }
    Tensor::new(vec![tq, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_head_hand_computed() {
        // Two positions, width 2, one head: scale = 1/sqrt(2).
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let k = Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 0.0]).unwrap();
        let v = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut scores = vec![0.0; 4];
        let out = multi_head_attention(&q, &k, &v, 1, Some(&mut scores)).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (row, (l0, l1)) in [(1.0 * s, 2.0 * s), (2.0 * s, 0.0)].iter().enumerate() {
            let p0 = 1.0 / (1.0 + (l1 - l0).exp());
            let p1 = 1.0 - p0;
            assert!((scores[row * 2] as f64 - p0).abs() < 1e-5);
            assert!((out.row(row)[0] as f64 - p0).abs() < 1e-5);
            assert!((out.row(row)[1] as f64 - p1).abs() < 1e-5);
        }
    }

    #[test]
    fn scores_do_not_change_output() {
        let q = Tensor::from_fn(&[5, 8], |i| (i as f32 * 0.37).sin());
        let k = Tensor::from_fn(&[7, 8], |i| (i as f32 * 0.11).cos());
        let v = Tensor::from_fn(&[7, 8], |i| i as f32 * 0.01);
        let plain = multi_head_attention(&q, &k, &v, 2, None).unwrap();
        let mut s = vec![0.0; 2 * 5 * 7];
        let tapped = multi_head_attention(&q, &k, &v, 2, Some(&mut s)).unwrap();
        assert_eq!(plain, tapped);
    }
}
