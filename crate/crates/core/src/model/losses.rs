//! Least-squares adversarial losses and the masked reconstruction term.
//!
//! The graph versions are what training differentiates; [`scalar`] evaluates
//! the very same code on plain score lists.

use radiogan_tensor::{Graph, Real, Tensor, Var};

use crate::error::Result;

/// `mean[(D_I(x) - 1)^2] + mean[D_I(G_x)^2]`.
pub fn loss_d_i<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let a = g.mean_sq_diff(real, 1.0)?;
    let b = g.mean_sq_diff(fake, 0.0)?;
    Ok(g.add(a, b)?)
}

/// `mean[(D_IS(x,m) - 1)^2] + mean[D_IS(x,m_bar)^2] + mean[D_IS(G_x,G_m)^2]`.
pub fn loss_d_is<T: Real>(g: &mut Graph<T>, real: Var, wrong_mask: Var, fake: Var) -> Result<Var> {
    let terms = [g.mean_sq_diff(real, 1.0)?, g.mean_sq_diff(wrong_mask, 0.0)?, g.mean_sq_diff(fake, 0.0)?];
    Ok(g.add_all(&terms)?)
}

/// Matched tuple toward 1; wrong mask, wrong gene and fake toward 0.
pub fn loss_d_isg<T: Real>(g: &mut Graph<T>, matched: Var, wrong_mask: Var, wrong_gene: Var, fake: Var) -> Result<Var> {
    let terms = [
        g.mean_sq_diff(matched, 1.0)?,
        g.mean_sq_diff(wrong_mask, 0.0)?,
        g.mean_sq_diff(wrong_gene, 0.0)?,
        g.mean_sq_diff(fake, 0.0)?,
    ];
    Ok(g.add_all(&terms)?)
}

/// Generator loss parts.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub masked_l1: Var,
}

/// Three adversarial terms toward 1 plus `lambda * mean(|G_x - x| * region)`,
/// where `region` is the eroded background and the mean runs over all pixels.
pub fn loss_g<T: Real>(
    g: &mut Graph<T>,
    fake_i: Var,
    fake_is: Var,
    fake_isg: Var,
    generated: Var,
    base: Var,
    region: &Tensor<T>,
    lambda: f64,
) -> Result<GeneratorLoss> {
    let adv = [g.mean_sq_diff(fake_i, 1.0)?, g.mean_sq_diff(fake_is, 1.0)?, g.mean_sq_diff(fake_isg, 1.0)?];
    let adv = g.add_all(&adv)?;
    let l1 = g.masked_l1(generated, base, region)?;
    let weighted = g.scale(l1, lambda);
    let total = g.add(adv, weighted)?;
    Ok(GeneratorLoss { total, masked_l1: l1 })
}

/// The same losses on plain score vectors.
pub mod scalar {
    use super::*;

    fn scores(g: &mut Graph<f64>, s: &[f64]) -> Result<Var> {
        Ok(g.constant(Tensor::new(&[s.len()], s.to_vec())?))
    }

    pub fn d_i(real: &[f64], fake: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let (r, f) = (scores(&mut g, real)?, scores(&mut g, fake)?);
        let l = loss_d_i(&mut g, r, f)?;
        Ok(g.value(l).data()[0])
    }

    pub fn d_is(real: &[f64], wrong_mask: &[f64], fake: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = [scores(&mut g, real)?, scores(&mut g, wrong_mask)?, scores(&mut g, fake)?];
        let l = loss_d_is(&mut g, vars[0], vars[1], vars[2])?;
        Ok(g.value(l).data()[0])
    }

    pub fn d_isg(matched: &[f64], wrong_mask: &[f64], wrong_gene: &[f64], fake: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = [
            scores(&mut g, matched)?,
            scores(&mut g, wrong_mask)?,
            scores(&mut g, wrong_gene)?,
            scores(&mut g, fake)?,
        ];
        let l = loss_d_isg(&mut g, vars[0], vars[1], vars[2], vars[3])?;
        Ok(g.value(l).data()[0])
    }

    /// `generated`, `base` and `region` are flat images of equal length.
    pub fn g(
        fake_i: &[f64],
        fake_is: &[f64],
        fake_isg: &[f64],
        generated: &[f64],
        base: &[f64],
        region: &[f64],
        lambda: f64,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let vars = [scores(&mut g, fake_i)?, scores(&mut g, fake_is)?, scores(&mut g, fake_isg)?];
        let gx = scores(&mut g, generated)?;
        let x = scores(&mut g, base)?;
        let region = Tensor::new(&[region.len()], region.to_vec())?;
        let l = loss_g(&mut g, vars[0], vars[1], vars[2], gx, x, &region, lambda)?;
        Ok(g.value(l.total).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::scalar;

    #[test]
    fn hand_values() {
        assert!((scalar::d_i(&[0.5, 1.5], &[0.2]).unwrap() - 0.29).abs() < 1e-12);
        assert!((scalar::d_is(&[0.8], &[0.1], &[0.3]).unwrap() - 0.14).abs() < 1e-12);
        assert!((scalar::d_isg(&[0.9], &[0.2], &[0.1], &[0.3]).unwrap() - 0.15).abs() < 1e-12);
        let l = scalar::g(&[0.0], &[0.0], &[0.0], &[0.1, -0.1, 0.2, 0.0], &[0.0; 4], &[1.0; 4], 10.0).unwrap();
        assert!((l - (3.0 + 10.0 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_error() {
        assert!(scalar::d_i(&[], &[0.0]).is_err());
    }
}
