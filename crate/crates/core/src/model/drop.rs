use super::TokenGrid;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Token drop: during training each active token is retired independently with
/// probability `p` and survivors are scaled by `1/(1-p)`. Identity at inference.
///
/// A draw that would retire every active token is repeated.
pub fn drop_tokens(grid: &TokenGrid, p: f64, rng: &mut Rng, training: bool) -> Result<TokenGrid> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "drop probability {p} outside [0,1)"
        )));
    }
    let mut out = grid.clone();
    if !training || p == 0.0 || grid.active() == 0 {
        return Ok(out);
    }
    let active: Vec<usize> = (0..grid.len()).filter(|&i| grid.mask()[i]).collect();
    let dropped = loop {
        let d: Vec<bool> = active.iter().map(|_| rng.bernoulli(p)).collect();
        if d.iter().any(|&x| !x) {
            break d;
        }
    };
    for (&i, &d) in active.iter().zip(&dropped) {
        if d {
            out.retire(i);
        }
    }
    out.scale_active(1.0 / (1.0 - p));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn grid(l: usize, c: usize) -> TokenGrid {
        TokenGrid::new(1, l, Array2::from_shape_fn((l, c), |(i, j)| 1.0 + (i * c + j) as f64))
    }

    #[test]
    fn zero_probability_is_identity() {
        let g = grid(36, 4);
        let out = drop_tokens(&g, 0.0, &mut Rng::new(1), true).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn inference_is_identity() {
        let g = grid(36, 4);
        assert_eq!(drop_tokens(&g, 0.2, &mut Rng::new(1), false).unwrap(), g);
    }

    #[test]
    fn survivors_scaled_by_inverse_retention() {
        let g = grid(36, 3);
        let out = drop_tokens(&g, 0.2, &mut Rng::new(7), true).unwrap();
        assert!(out.active() < 36 && out.active() > 0);
        for i in 0..36 {
            for j in 0..3 {
                let expected = if out.mask()[i] { g.tokens()[[i, j]] * 1.25 } else { 0.0 };
                assert!((out.tokens()[[i, j]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_probability() {
        let g = grid(4, 2);
        for p in [-0.1, 1.0, 1.5] {
            assert!(matches!(
                drop_tokens(&g, p, &mut Rng::new(0), true),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn never_drops_everything() {
        let g = grid(1, 2);
        let mut rng = Rng::new(0);
        for _ in 0..200 {
            assert_eq!(drop_tokens(&g, 0.95, &mut rng, true).unwrap().active(), 1);
        }
    }

    #[test]
    fn already_retired_tokens_stay_retired() {
        let mut g = grid(6, 2);
        g.retire(2);
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let out = drop_tokens(&g, 0.5, &mut rng, true).unwrap();
            assert!(!out.mask()[2]);
            assert!(out.token(2).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn survivor_fraction_concentrates() {
        let g = grid(100_000, 1);
        let out = drop_tokens(&g, 0.2, &mut Rng::new(2024), true).unwrap();
        let frac = out.active() as f64 / 100_000.0;
        assert!((frac - 0.8).abs() < 0.01, "{frac}");
    }
}
