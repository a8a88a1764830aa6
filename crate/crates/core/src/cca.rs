//! Regularized, normalized canonical correlation analysis.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DIM: usize = 300;
pub const DEFAULT_POWER: f64 = 4.0;
pub const DEFAULT_REG_GRID: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    /// `d_x x d_emb`, columns in descending correlation order.
    pub w_x: Tensor,
    /// `d_y x d_emb`.
    pub w_y: Tensor,
    pub mean_x: Tensor,
    pub mean_y: Tensor,
    pub correlations: Vec<f64>,
    pub reg: f64,
    /// Exponent applied to the correlations when scaling projections.
    pub power: f64,
}

fn to_matrix(t: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return shape_err(format!("{what} must be n x d, got {:?}", t.dims()));
    }
    let (r, c) = (t.dims()[0], t.dims()[1]);
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

fn to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let data = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data)
}

/// Centered copy and the column means.
fn center(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()));
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (c, mean)
}

/// `S^{-1/2}` of a symmetric positive semi-definite matrix.
fn inv_sqrt(s: DMatrix<f64>, reg: f64, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(s);
    let min = eig.eigenvalues.min();
    if reg == 0.0 && min <= EIGEN_FLOOR {
        return Err(Error::Numerical(format!(
            "{what} covariance is rank-deficient (smallest eigenvalue {min:e}); use reg > 0"
        )));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Fits `d_emb` canonical direction pairs with `reg * I` added to both
/// auto-covariances.
pub fn fit_cca(x: &Tensor, y: &Tensor, reg: f64, d_emb: usize) -> Result<CcaModel> {
    let (x, y) = (to_matrix(x, "X")?, to_matrix(y, "Y")?);
    let n = x.nrows();
    if y.nrows() != n {
        return shape_err(format!("views have {n} and {} rows", y.nrows()));
    }
    if n < 2 {
        return Err(Error::Validation("CCA needs at least two pairs".into()));
    }
    if reg.is_nan() || reg < 0.0 {
        return Err(Error::Config(format!(
            "reg must be non-negative, got {reg}"
        )));
    }
    let (dx, dy) = (x.ncols(), y.ncols());
    if d_emb == 0 || d_emb > dx.min(dy).min(n) {
        return Err(Error::Config(format!(
            "d_emb {d_emb} must lie in 1..={} for {n} pairs of {dx}/{dy} dims",
            dx.min(dy).min(n)
        )));
    }
    let (xc, mx) = center(&x);
    let (yc, my) = center(&y);
    let scale = 1.0 / (n - 1) as f64;
    let sxx = xc.transpose() * &xc * scale + DMatrix::identity(dx, dx) * reg;
    let syy = yc.transpose() * &yc * scale + DMatrix::identity(dy, dy) * reg;
    let sxy = xc.transpose() * &yc * scale;
    let kx = inv_sqrt(sxx, reg, "image")?;
    let ky = inv_sqrt(syy, reg, "text")?;
    let svd = (&kx * sxy * &ky).svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(d_emb);

    let mut wx = DMatrix::zeros(dx, d_emb);
    let mut wy = DMatrix::zeros(dy, d_emb);
    let mut correlations = Vec::with_capacity(d_emb);
    for (k, &j) in order.iter().enumerate() {
        let mut a = &kx * u.column(j);
        let mut b = &ky * v_t.row(j).transpose();
        // fix the sign so the largest-magnitude image weight is positive
        let lead = a
            .iter()
            .cloned()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            a.neg_mut();
            b.neg_mut();
        }
        wx.set_column(k, &a);
        wy.set_column(k, &b);
        correlations.push(svd.singular_values[j].clamp(0.0, 1.0));
    }
    Ok(CcaModel {
        w_x: to_tensor(&wx)?,
        w_y: to_tensor(&wy)?,
        mean_x: Tensor::from_vec(mx.iter().cloned().collect())?,
        mean_y: Tensor::from_vec(my.iter().cloned().collect())?,
        correlations,
        reg,
        power: DEFAULT_POWER,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl CcaModel {
    pub fn dim(&self) -> usize {
        self.correlations.len()
    }

    pub fn with_power(mut self, power: f64) -> Self {
        self.power = power;
        self
    }

    /// Centers, projects, scales coordinate `j` by `corr_j^p` and
    /// L2-normalizes. A zero result stays zero.
    pub fn project(&self, v: &[f64], view: View) -> Result<Vec<f64>> {
        let (w, mean) = match view {
            View::Image => (&self.w_x, &self.mean_x),
            View::Text => (&self.w_y, &self.mean_y),
        };
        let (d, k) = (w.dims()[0], w.dims()[1]);
        if v.len() != d {
            return shape_err(format!(
                "{view:?} vector has {} dims, model expects {d}",
                v.len()
            ));
        }
        let mut out = vec![0.0; k];
        for (i, (&vi, &mi)) in v.iter().zip(mean.data()).enumerate() {
            let c = vi - mi;
            if c != 0.0 {
                let row = &w.data()[i * k..(i + 1) * k];
                for (o, &wij) in out.iter_mut().zip(row) {
                    *o += c * wij;
                }
            }
        }
        for (o, &r) in out.iter_mut().zip(&self.correlations) {
            *o *= r.powf(self.power);
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(out)
    }

    /// Index of the choice closest in cosine to the image; lowest index wins ties.
    pub fn rank_choices(&self, image: &[f64], choices: &[Vec<f64>]) -> Result<usize> {
        if choices.is_empty() {
            return Err(Error::Validation("no choices to rank".into()));
        }
        let pi = self.project(image, View::Image)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in choices.iter().enumerate() {
            let s = cosine(&pi, &self.project(c, View::Text)?);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(best.0)
    }

    pub fn to_entries(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(vec![
            ("W_x".into(), self.w_x.clone()),
            ("W_y".into(), self.w_y.clone()),
            ("mean_x".into(), self.mean_x.clone()),
            ("mean_y".into(), self.mean_y.clone()),
            (
                "correlations".into(),
                Tensor::from_vec(self.correlations.clone())?,
            ),
            ("reg".into(), Tensor::scalar(self.reg)?),
            ("p".into(), Tensor::scalar(self.power)?),
        ])
    }

    pub fn from_entries(mut e: Vec<(String, Tensor)>) -> Result<Self> {
        let mut take = |n: &str| checkpoint::take_entry(&mut e, n);
        let m = CcaModel {
            w_x: take("W_x")?,
            w_y: take("W_y")?,
            mean_x: take("mean_x")?,
            mean_y: take("mean_y")?,
            correlations: take("correlations")?.into_data(),
            reg: take("reg")?.data()[0],
            power: take("p")?.data()[0],
        };
        let k = m.correlations.len();
        let ok = m.w_x.rank() == 2
            && m.w_y.rank() == 2
            && m.w_x.dims()[1] == k
            && m.w_y.dims()[1] == k
            && m.mean_x.len() == m.w_x.dims()[0]
            && m.mean_y.len() == m.w_y.dims()[0];
        if !ok {
            return Err(Error::Format("inconsistent CCA model dimensions".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_entries()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| gaussian(rng)).collect()).unwrap()
    }

    fn col(t: &Tensor, j: usize) -> Vec<f64> {
        let k = t.dims()[1];
        (0..t.dims()[0]).map(|i| t.data()[i * k + j]).collect()
    }

    #[test]
    fn identical_views_correlate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 100, 4);
        let m = fit_cca(&x, &x, 1e-6, 4).unwrap();
        assert!(m.correlations[0] >= 0.99);
    }

    #[test]
    fn independent_views_do_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 500, 5);
        let y = randn(&mut rng, 500, 5);
        let m = fit_cca(&x, &y, 1.0, 5).unwrap();
        assert!(
            m.correlations.iter().all(|&c| c < 0.2),
            "{:?}",
            m.correlations
        );
    }

    #[test]
    fn invertible_linear_map_gives_unit_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 200, 2);
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![-0.5, 3.0]]).unwrap();
        let y = x.matmul(&a).unwrap();
        let m = fit_cca(&x, &y, 1e-8, 2).unwrap();
        assert!(
            (m.correlations[0] - 1.0).abs() < 1e-6,
            "{:?}",
            m.correlations
        );
    }

    #[test]
    fn rank_deficient_needs_reg() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = randn(&mut rng, 30, 2);
        // third column duplicates the first
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let r = &base.data()[2 * i..2 * i + 2];
                vec![r[0], r[1], r[0]]
            })
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let y = randn(&mut rng, 30, 3);
        assert!(matches!(fit_cca(&x, &y, 0.0, 2), Err(Error::Numerical(_))));
        fit_cca(&x, &y, 0.01, 2).unwrap();
    }

    #[test]
    fn bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 10, 3);
        let y = randn(&mut rng, 9, 3);
        assert!(fit_cca(&x, &y, 0.1, 2).is_err());
        assert!(fit_cca(&x, &x, 0.1, 4).is_err());
        assert!(fit_cca(&x, &x, -1.0, 2).is_err());
    }

    /// Top canonical correlation found by alternating regressions
    /// `w_y ~ Syy^-1 Syx w_x`, `w_x ~ Sxx^-1 Sxy w_y`.
    fn alternating_oracle(x: &Tensor, y: &Tensor, reg: f64) -> f64 {
        let n = x.dims()[0];
        let (dx, dy) = (x.dims()[1], y.dims()[1]);
        let cen = |t: &Tensor, d: usize| {
            let mut m = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    m[j] += t.data()[i * d + j] / n as f64;
                }
            }
            let mut c = t.data().to_vec();
            for i in 0..n {
                for j in 0..d {
                    c[i * d + j] -= m[j];
                }
            }
            c
        };
        let (xc, yc) = (cen(x, dx), cen(y, dy));
        let cov = |a: &[f64], da: usize, b: &[f64], db: usize, r: f64| {
            let mut s = DMatrix::zeros(da, db);
            for i in 0..n {
                for p in 0..da {
                    for q in 0..db {
                        s[(p, q)] += a[i * da + p] * b[i * db + q] / (n - 1) as f64;
                    }
                }
            }
            if r > 0.0 {
                for p in 0..da.min(db) {
                    s[(p, p)] += r;
                }
            }
            s
        };
        let sxx = cov(&xc, dx, &xc, dx, reg);
        let syy = cov(&yc, dy, &yc, dy, reg);
        let sxy = cov(&xc, dx, &yc, dy, 0.0);
        let (lx, ly) = (sxx.clone().lu(), syy.clone().lu());
        let mut wx = DVector::from_element(dx, 1.0);
        for _ in 0..2000 {
            let wy = ly.solve(&(sxy.transpose() * &wx)).unwrap();
            wx = lx.solve(&(&sxy * &wy)).unwrap();
            wx /= wx.norm();
        }
        let wy = ly.solve(&(sxy.transpose() * &wx)).unwrap();
        let num = (wx.transpose() * &sxy * &wy)[0];
        let den = ((wx.transpose() * &sxx * &wx)[0] * (wy.transpose() * &syy * &wy)[0]).sqrt();
        num / den
    }

    #[test]
    fn matches_alternating_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, 50, 4);
        let noise = randn(&mut rng, 50, 4);
        let mix = randn(&mut rng, 4, 4);
        let y = x
            .matmul(&mix)
            .unwrap()
            .add(&noise.scale(2.0).unwrap())
            .unwrap();
        for reg in [0.0, 0.01, 0.1] {
            let m = fit_cca(&x, &y, reg, 4).unwrap();
            let oracle = alternating_oracle(&x, &y, reg);
            assert!(
                (m.correlations[0] - oracle).abs() < 1e-3,
                "reg {reg}: {} vs {oracle}",
                m.correlations[0]
            );
        }
    }

    #[test]
    fn directions_realise_their_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, 80, 3);
        let y = x
            .matmul(&randn(&mut rng, 3, 3))
            .unwrap()
            .add(&randn(&mut rng, 80, 3))
            .unwrap();
        let m = fit_cca(&x, &y, 0.0, 3).unwrap();
        for j in 0..3 {
            let px: Vec<f64> = (0..80)
                .map(|i| {
                    (0..3)
                        .map(|k| {
                            (x.data()[i * 3 + k] - m.mean_x.data()[k]) * m.w_x.data()[k * 3 + j]
                        })
                        .sum()
                })
                .collect();
            let py: Vec<f64> = (0..80)
                .map(|i| {
                    (0..3)
                        .map(|k| {
                            (y.data()[i * 3 + k] - m.mean_y.data()[k]) * m.w_y.data()[k * 3 + j]
                        })
                        .sum()
                })
                .collect();
            assert!((cosine(&px, &py) - m.correlations[j]).abs() < 1e-9);
        }
        assert!(m.correlations.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn symmetric_in_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, 60, 3);
        let y = x
            .matmul(&randn(&mut rng, 3, 3))
            .unwrap()
            .add(&randn(&mut rng, 60, 3))
            .unwrap();
        let a = fit_cca(&x, &y, 0.05, 3).unwrap();
        let b = fit_cca(&y, &x, 0.05, 3).unwrap();
        for j in 0..3 {
            assert!((a.correlations[j] - b.correlations[j]).abs() < 1e-9);
            let (ax, by) = (col(&a.w_x, j), col(&b.w_y, j));
            assert!((cosine(&ax, &by).abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, 100, 4);
        let m = fit_cca(&x, &x, 1e-6, 4).unwrap();
        let v = [0.3, -1.2, 0.5, 2.0];
        let p = m.project(&v, View::Image).unwrap();
        assert!((p.iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(cosine(&p, &m.project(&v, View::Text).unwrap()) >= 0.99);
        let zero = m.project(m.mean_x.data(), View::Image).unwrap();
        assert!(zero.iter().all(|&z| z == 0.0));
        assert!(m.project(&[1.0], View::Image).is_err());

        let mut centered = m.clone();
        centered.mean_x = Tensor::zeros(&[4]);
        let a = centered.project(&v, View::Image).unwrap();
        let b = centered.project(&v.map(|t| 3.5 * t), View::Image).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert!((s - t).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, 200, 3);
        let mut m = fit_cca(&x, &x, 1e-6, 3).unwrap();
        m.power = 0.0;
        m.mean_x = Tensor::zeros(&[3]);
        m.mean_y = Tensor::zeros(&[3]);
        let v = vec![1.0, 0.5, -0.2];
        let choices = vec![vec![-0.5, 1.0, 0.0], v.clone()];
        assert_eq!(m.rank_choices(&v, &choices).unwrap(), 1);
        assert_eq!(m.rank_choices(&v, &[v.clone(), v.clone()]).unwrap(), 0);
        assert!(m.rank_choices(&v, &[]).is_err());
    }

    proptest! {
        #[test]
        fn ranking_matches_scan_and_permutes(seed in 0u64..500, shift in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, 40, 3);
            let y = x.add(&randn(&mut rng, 40, 3)).unwrap();
            let m = fit_cca(&x, &y, 0.01, 3).unwrap();
            let img: Vec<f64> = (0..3).map(|_| gaussian(&mut rng)).collect();
            let choices: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| gaussian(&mut rng)).collect()).collect();
            let pi = m.project(&img, View::Image).unwrap();
            let sims: Vec<f64> = choices.iter().map(|c| cosine(&pi, &m.project(c, View::Text).unwrap())).collect();
            let mut scan = 0;
            for i in 1..4 {
                if sims[i] > sims[scan] {
                    scan = i;
                }
            }
            let got = m.rank_choices(&img, &choices).unwrap();
            prop_assert_eq!(got, scan);
            let mut rotated = choices.clone();
            rotated.rotate_left(shift);
            prop_assert_eq!(m.rank_choices(&img, &rotated).unwrap(), (got + 4 - shift) % 4);
            let r: f64 = rng.random_range(0.1..10.0);
            let mut zero_mean = m.clone();
            zero_mean.mean_y = Tensor::zeros(&[3]);
            let base = zero_mean.rank_choices(&img, &choices).unwrap();
            let scaled: Vec<Vec<f64>> = choices.iter().map(|c| c.iter().map(|v| v * r).collect()).collect();
            prop_assert_eq!(zero_mean.rank_choices(&img, &scaled).unwrap(), base);
        }
    }

    #[test]
    fn persists_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, 30, 3);
        let y = randn(&mut rng, 30, 2);
        let m = fit_cca(&x, &y, 0.01, 2).unwrap().with_power(2.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cca.bin");
        m.save(&p).unwrap();
        assert_eq!(CcaModel::load(&p).unwrap(), m);
    }
}
