/// Binary logistic regression on standardized features, fitted by full-batch
/// gradient descent with a small ridge penalty.
#[derive(Debug, Clone)]
pub struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

const STEPS: usize = 400;
const LEARNING_RATE: f64 = 0.5;
const RIDGE: f64 = 1e-4;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn fit(features: &[Vec<f64>], labels: &[bool]) -> Self {
        let d = features.first().map_or(0, Vec::len);
        let k = features.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / k);
        }
        let mut scale = vec![0.0; d];
        for f in features {
            scale
                .iter_mut()
                .zip(f.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m).powi(2) / k);
        }
        scale
            .iter_mut()
            .for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
        let x: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                f.iter()
                    .zip(mean.iter().zip(&scale))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect();

        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut grad = vec![0.0; d];
        for _ in 0..STEPS {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (xi, &yi) in x.iter().zip(labels) {
                let z = b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let e = sigmoid(z) - f64::from(u8::from(yi));
                grad.iter_mut().zip(xi).for_each(|(g, v)| *g += e * v / k);
                gb += e / k;
            }
            w.iter_mut()
                .zip(&grad)
                .for_each(|(wi, g)| *wi -= LEARNING_RATE * (g + RIDGE * *wi));
            b -= LEARNING_RATE * gb;
        }
        Self {
            mean,
            scale,
            weights: w,
            bias: b,
        }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let z = self.bias
            + features
                .iter()
                .zip(self.mean.iter().zip(&self.scale))
                .zip(&self.weights)
                .map(|((v, (m, s)), w)| (v - m) / s * w)
                .sum::<f64>();
        sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_a_threshold() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 3.0]).collect();
        let ys: Vec<bool> = (0..40).map(|i| i < 20).collect();
        let m = Logistic::fit(&xs, &ys);
        assert!(m.predict(&[2.0, 3.0]) > 0.9);
        assert!(m.predict(&[37.0, 3.0]) < 0.1);
    }

    #[test]
    fn uninformative_features_give_half() {
        let xs: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0]).collect();
        let ys: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert!((Logistic::fit(&xs, &ys).predict(&[1.0]) - 0.5).abs() < 1e-9);
    }
}
