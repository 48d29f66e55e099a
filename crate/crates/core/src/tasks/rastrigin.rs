use rand::Rng;
use rand_distr::StandardNormal;

/// f(x) = ‖Ax + b‖² + ½·cᵀcos(x) with i.i.d. standard-normal A, b, c.
#[derive(Debug, Clone, PartialEq)]
pub struct Rastrigin {
    /// Row-major d×d.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub x0: Vec<f64>,
}

impl Rastrigin {
    pub fn sample(dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let a = draw(dim * dim);
        let b = draw(dim);
        let c = draw(dim);
        let x0 = draw(dim);
        Self { a, b, c, x0 }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| self.a[i * d..(i + 1) * d].iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + self.b[i])
            .collect()
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        let r = self.residual(x);
        r.iter().map(|v| v * v).sum::<f64>() + 0.5 * self.c.iter().zip(x).map(|(c, x)| c * x.cos()).sum::<f64>()
    }

    pub fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim();
        let r = self.residual(x);
        let loss = r.iter().map(|v| v * v).sum::<f64>()
            + 0.5 * self.c.iter().zip(x).map(|(c, x)| c * x.cos()).sum::<f64>();
        let mut g: Vec<f64> = (0..d).map(|j| -0.5 * self.c[j] * x[j].sin()).collect();
        for i in 0..d {
            let ri = 2.0 * r[i];
            for j in 0..d {
                g[j] += ri * self.a[i * d + j];
            }
        }
        (loss, g)
    }
}
