//! Training losses in normalized parameter space.

use serde::Serialize;

use crate::autodiff::{Scalar, Tensor, Var};
use crate::distortion::RadialGeometry;
use crate::error::{Error, Result};
use crate::slicing::{Partition, SlicingMode};

/// Per-coefficient means of the confidence densities; higher orders peak
/// further out.
pub const CONFIDENCE_MU: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];
pub const CONFIDENCE_SIGMA: f64 = 1.0;
/// Abscissa interval: the innermost patch sits near −2, the rim near +2.
pub const TRUNCATION: (f64, f64) = (-2.0, 2.0);

pub fn normal_density(x: f64, sigma: f64, mu: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let z = (x - mu) / sigma;
    Ok((-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma))
}

/// Per-patch weights `C_t(k_i) = f(x_t; 1, μ_i)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceTable {
    pub abscissa: Vec<f64>,
    pub weights: Vec<[f64; 4]>,
}

impl ConfidenceTable {
    /// `x_t = −2 + 4(t + 0.5)/n` for ring `t` (0 innermost).
    pub fn rings(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("confidence table needs at least one ring"));
        }
        let (lo, hi) = TRUNCATION;
        Self::from_abscissa((0..n).map(|t| lo + (hi - lo) * (t as f64 + 0.5) / n as f64).collect())
    }

    pub fn from_abscissa(abscissa: Vec<f64>) -> Result<Self> {
        let weights = abscissa
            .iter()
            .map(|&x| {
                let mut w = [0.0; 4];
                for (i, m) in CONFIDENCE_MU.iter().enumerate() {
                    w[i] = normal_density(x, CONFIDENCE_SIGMA, *m)?;
                }
                Ok(w)
            })
            .collect::<Result<_>>()?;
        Ok(Self { abscissa, weights })
    }

    /// Rings use their index; square tiles use the radius of the tile center
    /// relative to the disk radius, clamped to the rim.
    pub fn for_partition(part: &Partition) -> Result<Self> {
        match part.mode() {
            SlicingMode::Annulus => Self::rings(part.len()),
            SlicingMode::Square => {
                let geom = RadialGeometry::square(part.width());
                let (lo, hi) = TRUNCATION;
                let xs = (0..part.len())
                    .map(|t| {
                        let idx = part.region(t);
                        let (sx, sy) = idx.iter().fold((0.0, 0.0), |(ax, ay), &i| {
                            let (dx, dy) = geom.offset(i % part.width(), i / part.width());
                            (ax + dx, ay + dy)
                        });
                        let n = idx.len() as f64;
                        let r = (sx / n).hypot(sy / n) / geom.radius();
                        lo + (hi - lo) * r.clamp(0.0, 1.0)
                    })
                    .collect();
                Self::from_abscissa(xs)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            abscissa: self.abscissa.clone(),
            weights: self.weights.iter().map(|w| w.map(|v| v * factor)).collect(),
        }
    }

    /// `(n, 4)` weight tensor.
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.weights.iter().flatten().map(|&v| T::of(v)).collect();
        Tensor::new([self.len(), 4], data).expect("shape matches data")
    }
}

/// `Σ_i |p_i − p̂_i|`.
pub fn loss_global<'g, T: Scalar>(pred: &Var<'g, T>, gt: &Var<'g, T>) -> Result<Var<'g, T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "loss_global",
            lhs: pred.shape(),
            rhs: gt.shape(),
        });
    }
    Ok(pred.sub(gt)?.abs().sum())
}

/// `Σ_i sqrt( Σ_t C_t,i (P_t,i − p̂_i)² / Σ_t C_t,i )` for `(n, 4)` patch
/// predictions against `(4)` ground truth.
pub fn loss_local<'g, T: Scalar>(patches: &Var<'g, T>, gt: &Var<'g, T>, table: &ConfidenceTable) -> Result<Var<'g, T>> {
    let s = patches.shape();
    if s.len() != 2 || s[1] != 4 || s[0] != table.len() {
        return Err(Error::contract(format!(
            "patch predictions {s:?} do not match a {}-patch confidence table",
            table.len()
        )));
    }
    let c = table.tensor::<T>();
    let totals: Vec<f64> = (0..4).map(|i| table.weights.iter().map(|w| w[i]).sum()).collect();
    let g = patches.graph();
    let norm = g.constant(Tensor::new([4], totals.iter().map(|&t| T::of(1.0 / t)).collect())?);
    let weighted = patches.sub(gt)?.square().mul(&g.constant(c))?;
    Ok(weighted.sum_axis(0)?.mul(&norm)?.sqrt().sum())
}

/// Mean squared difference.
pub fn loss_image<'g, T: Scalar>(pred: &Var<'g, T>, gt: &Var<'g, T>) -> Result<Var<'g, T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::contract(format!(
            "image loss needs equal shapes, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(pred.sub(gt)?.square().mean())
}

pub struct LossTerms<'g, T: Scalar> {
    pub global: Var<'g, T>,
    pub local: Var<'g, T>,
    pub image: Var<'g, T>,
    pub total: Var<'g, T>,
}

/// Unweighted sum of the three terms.
pub fn loss_total<'g, T: Scalar>(global: Var<'g, T>, local: Var<'g, T>, image: Var<'g, T>) -> Result<LossTerms<'g, T>> {
    let total = global.add(&local)?.add(&image)?;
    Ok(LossTerms {
        global,
        local,
        image,
        total,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Graph;
    use crate::gradcheck;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn density_values() {
        assert!((normal_density(0.3, 1.0, 0.3).unwrap() - 0.3989423).abs() < 1e-7);
        assert_eq!(
            normal_density(-2.0, 1.0, -1.0).unwrap(),
            normal_density(0.0, 1.0, -1.0).unwrap()
        );
        let closed = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((normal_density(-2.0, 1.0, -1.0).unwrap() - closed).abs() < 1e-15);
        assert!((closed - 0.2419707).abs() < 1e-7);
        assert!(matches!(normal_density(0.0, 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn confidence_abscissa() {
        let one = ConfidenceTable::rings(1).unwrap();
        assert_eq!(one.abscissa, vec![0.0]);
        for i in 0..4 {
            assert_eq!(one.weights[0][i], normal_density(0.0, 1.0, CONFIDENCE_MU[i]).unwrap());
        }
        assert_eq!(ConfidenceTable::rings(4).unwrap().abscissa, vec![-1.5, -0.5, 0.5, 1.5]);
    }

    fn argmax(table: &ConfidenceTable, i: usize) -> usize {
        (0..table.len())
            .max_by(|&a, &b| table.weights[a][i].total_cmp(&table.weights[b][i]))
            .unwrap()
    }

    #[test]
    fn confidence_argmax_moves_outward() {
        for n in 2..=32 {
            let table = ConfidenceTable::rings(n).unwrap();
            assert!(argmax(&table, 3) >= n / 2, "n={n}");
            assert!(table.abscissa.windows(2).all(|w| w[1] > w[0]));
            assert!(table.weights.iter().flatten().all(|&w| w > 0.0));
            if n >= 4 {
                let order: Vec<usize> = (0..4).map(|i| argmax(&table, i)).collect();
                assert!(order.windows(2).all(|w| w[1] >= w[0]), "n={n}: {order:?}");
            }
        }
    }

    #[test]
    fn square_tiles_map_center_to_low_abscissa() {
        let part = Partition::square(32, 32, 4).unwrap();
        let table = ConfidenceTable::for_partition(&part).unwrap();
        // Central tiles (5, 6, 9, 10) are closer than corners (0, 3, 12, 15).
        assert!(table.abscissa[5] < table.abscissa[0]);
        assert_eq!(table.abscissa[0], 2.0);
        let single = ConfidenceTable::for_partition(&Partition::square(32, 32, 1).unwrap()).unwrap();
        assert_eq!(single.abscissa, vec![-2.0]);
    }

    #[test]
    fn global_loss_values_and_gradient() {
        let g = Graph::new();
        let gt = g.constant(t(&[4], &[0.2, 0.4, 0.6, 0.8]));
        assert_eq!(loss_global(&gt, &gt).unwrap().item(), 0.0);
        let p = g.param(t(&[4], &[0.3, 0.5, 0.7, 0.9]));
        let l = loss_global(&p, &gt).unwrap();
        assert!((l.item() - 0.4).abs() < 1e-12);
        l.backward().unwrap();
        assert_eq!(p.grad().unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);

        let report = gradcheck::check(&[t(&[4], &[0.1, 0.9, 0.45, 0.3])], |g, v| {
            loss_global(&v[0], &g.constant(t(&[4], &[0.2, 0.4, 0.6, 0.8])))
        })
        .unwrap();
        assert!(report.passes(1e-5));
    }

    #[test]
    fn local_loss_values() {
        let g = Graph::new();
        let gt = g.constant(t(&[4], &[0.5; 4]));
        let table = ConfidenceTable::rings(3).unwrap();
        let exact = g.constant(t(&[3, 4], &[0.5; 12]));
        assert_eq!(loss_local(&exact, &gt, &table).unwrap().item(), 0.0);
        let one = ConfidenceTable::rings(1).unwrap();
        let off = g.constant(t(&[1, 4], &[0.7, 0.3, 0.7, 0.3]));
        assert!((loss_local(&off, &gt, &one).unwrap().item() - 0.8).abs() < 1e-12);
        assert!(matches!(loss_local(&off, &gt, &table), Err(Error::Contract(_))));
    }

    #[test]
    fn local_loss_at_ground_truth_has_finite_gradient() {
        let g = Graph::new();
        let p = g.param(t(&[2, 4], &[0.5; 8]));
        let l = loss_local(&p, &g.constant(t(&[4], &[0.5; 4])), &ConfidenceTable::rings(2).unwrap()).unwrap();
        l.backward().unwrap();
        assert!(p.grad().unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn local_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Tensor::new([5, 4], (0..20).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let table = ConfidenceTable::rings(5).unwrap();
        let report = gradcheck::check(&[pred], |g, v| {
            loss_local(&v[0], &g.constant(t(&[4], &[0.1, 0.3, 0.5, 0.7])), &table)
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    proptest! {
        #[test]
        fn local_loss_scale_invariant(seed in any::<u64>(), n in 1usize..20, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Graph::<f64>::new();
            let pred = g.constant(Tensor::new([n, 4], (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap());
            let gt = g.constant(Tensor::new([4], (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap());
            let table = ConfidenceTable::rings(n).unwrap();
            let a = loss_local(&pred, &gt, &table).unwrap().item();
            let b = loss_local(&pred, &gt, &table.scaled(scale)).unwrap().item();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn image_loss_values_and_gradient() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2, 1], &[0.1, 0.2, 0.3, 0.4]));
        assert_eq!(loss_image(&a, &a).unwrap().item(), 0.0);
        let b = g.constant(t(&[2, 2, 1], &[0.6, 0.7, 0.8, 0.9]));
        assert!((loss_image(&a, &b).unwrap().item() - 0.25).abs() < 1e-12);
        assert!(loss_image(&a, &g.constant(t(&[4], &[0.0; 4]))).is_err());

        let gp = Graph::new();
        let x = gp.param(t(&[3], &[0.2, 0.5, 1.0]));
        loss_image(&x, &gp.constant(t(&[3], &[0.0, 0.5, 0.4])))
            .unwrap()
            .backward()
            .unwrap();
        let expected = [2.0 * 0.2 / 3.0, 0.0, 2.0 * 0.6 / 3.0];
        for (a, e) in x.grad().unwrap().data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_unweighted_sum() {
        let g = Graph::<f64>::new();
        let s = |v: f64| g.param(t(&[1], &[v]));
        let (a, b, c) = (s(0.4), s(0.8), s(0.25));
        let terms = loss_total(a, b, c).unwrap();
        assert!((terms.total.item() - 1.45).abs() < 1e-12);
        terms.total.backward().unwrap();
        for v in [a, b, c] {
            assert_eq!(v.grad().unwrap().data(), &[1.0]);
        }
        let z = Graph::<f64>::new();
        let zero = |_: ()| z.constant(t(&[1], &[0.0]));
        assert_eq!(loss_total(zero(()), zero(()), zero(())).unwrap().total.item(), 0.0);
    }
}
