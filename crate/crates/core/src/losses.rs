//! Hinge objectives shared by the adversarial, structural and frequency
//! discriminators.

use crate::error::{Error, Result};
use crate::tensor::Var;

fn check_scores(s: Var<'_>) -> Result<usize> {
    let shape = s.shape();
    match shape.as_slice() {
        [0] => Err(Error::EmptyBatch),
        [n] => Ok(*n),
        _ => Err(Error::shape(format!("scores must be 1-d, got {shape:?}"))),
    }
}

/// `mean(max(0, 1 - s_real) + max(0, 1 + s_fake))`.
pub fn hinge_d<'t>(s_real: Var<'t>, s_fake: Var<'t>) -> Result<Var<'t>> {
    let (nr, nf) = (check_scores(s_real)?, check_scores(s_fake)?);
    if nr != nf {
        return Err(Error::shape(format!(
            "{nr} real scores vs {nf} fake scores"
        )));
    }
    let real = s_real.affine(-1.0, 1.0)?.relu()?;
    let fake = s_fake.affine(1.0, 1.0)?.relu()?;
    real.add(fake)?.mean()
}

/// `mean(-s_fake)`.
pub fn hinge_g(s_fake: Var<'_>) -> Result<Var<'_>> {
    check_scores(s_fake)?;
    s_fake.mean()?.neg()
}

/// Both sides of a hinge objective: `(loss_d, loss_g)`.
pub fn hinge_losses<'t>(s_real: Var<'t>, s_fake: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    Ok((hinge_d(s_real, s_fake)?, hinge_g(s_fake)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn pair(real: &[f32], fake: &[f32]) -> (f32, f32) {
        let tape = Tape::new();
        let r = tape.constant(Tensor::new(&[real.len()], real.to_vec()).unwrap());
        let f = tape.constant(Tensor::new(&[fake.len()], fake.to_vec()).unwrap());
        let (d, g) = hinge_losses(r, f).unwrap();
        (d.item(), g.item())
    }

    #[test]
    fn hinge_table() {
        assert_eq!(pair(&[1.0], &[-1.0]), (0.0, 1.0));
        assert_eq!(pair(&[0.0], &[0.0]), (2.0, 0.0));
        assert_eq!(pair(&[0.5, 2.0], &[-0.25, 0.5]), (1.375, -0.125));
        let (d, g) = pair(&[0.2], &[0.3]);
        assert!((d - 2.1).abs() < 1e-6 && (g + 0.3).abs() < 1e-7);
        assert_eq!(pair(&[1.0], &[0.3]).1, -0.3);
    }

    #[test]
    fn symmetric_scores_inside_margin_cost_two() {
        for s in [-1.0, -0.5, 0.0, 0.25, 1.0] {
            assert!((pair(&[s], &[s]).0 - 2.0).abs() < 1e-6);
        }
        assert!(pair(&[3.0], &[3.0]).0 > 2.0);
    }

    #[test]
    fn empty_and_mismatched_batches() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(hinge_losses(e, e), Err(Error::EmptyBatch)));
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(hinge_d(a, b), Err(Error::Shape(_))));
    }
}
