//! Frame-exchange self-supervision: perturbed inputs that simulate
//! over-segmentation errors, plus the per-stage detection head.

use crate::optim::Parameter;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which frames were swapped with which. `p` holds the per-frame binary
/// detection target (1 = exchanged), usable directly as class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeSpec {
    pub pairs: Vec<(usize, usize)>,
    pub p: Vec<usize>,
    pub eta: f64,
}

impl ExchangeSpec {
    pub fn empty(t_len: usize, eta: f64) -> Self {
        ExchangeSpec { pairs: Vec::new(), p: vec![0; t_len], eta }
    }

    pub fn num_exchanged(&self) -> usize {
        2 * self.pairs.len()
    }

    /// Swap the paired feature rows of `x`. Swapping is an involution,
    /// so applying a spec to its own output restores the original.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (t_len, d) = x.dims2("exchange input");
        assert_eq!(t_len, self.p.len(), "spec built for a different length");
        let mut values = x.values_vec();
        for &(a, b) in &self.pairs {
            for j in 0..d {
                values.swap(a * d + j, b * d + j);
            }
        }
        Tensor::from_vec(vec![t_len, d], values)
    }
}

/// Select the largest even number of frames at or under eta percent,
/// pair them by a uniform random perfect matching, and swap each pair's
/// feature rows. The input is never mutated.
pub fn exchange_frames<T: Scalar>(
    x: &Tensor<T>,
    eta: f64,
    rng: &mut SplitMix64,
) -> (Tensor<T>, ExchangeSpec) {
    assert!((0.0..=100.0).contains(&eta), "eta must lie in [0, 100]");
    let (t_len, _) = x.dims2("exchange input");
    let mut n = (eta * t_len as f64 / 100.0).floor() as usize;
    n -= n % 2;
    if n < 2 {
        return (x.detach(), ExchangeSpec::empty(t_len, eta));
    }
    let mut chosen = rng.sample_distinct(n, t_len);
    rng.shuffle(&mut chosen);
    let mut spec = ExchangeSpec::empty(t_len, eta);
    for pair in chosen.chunks_exact(2) {
        spec.pairs.push((pair[0], pair[1]));
        spec.p[pair[0]] = 1;
        spec.p[pair[1]] = 1;
    }
    (spec.apply(x), spec)
}

/// Per-frame exchanged/not-exchanged classifier over a stage's final
/// hidden state.
pub struct ExchangeHead<T: Scalar> {
    w: Parameter<T>,
    b: Parameter<T>,
}

impl<T: Scalar> ExchangeHead<T> {
    pub fn new(prefix: &str, d: usize, rng: &mut SplitMix64) -> Self {
        ExchangeHead {
            w: Parameter::uniform(format!("{prefix}.w"), vec![d, 2], d, rng),
            b: Parameter::zeros(format!("{prefix}.b"), vec![2]),
        }
    }

    /// T x 2 probabilities; column 1 is the exchanged likelihood.
    pub fn forward(&self, h: &Tensor<T>) -> Tensor<T> {
        h.matmul(self.w.tensor())
            .add_row_broadcast(self.b.tensor())
            .softmax_rows()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, TOLERANCE};

    fn random_x(rng: &mut SplitMix64, t: usize, d: usize) -> Tensor<f64> {
        Tensor::from_vec(vec![t, d], (0..t * d).map(|_| rng.normal()).collect())
    }

    #[test]
    fn eta_zero_is_identity() {
        let mut rng = SplitMix64::new(1);
        let x = random_x(&mut rng, 12, 3);
        let (x_ex, spec) = exchange_frames(&x, 0.0, &mut rng);
        assert_eq!(x_ex.values_vec(), x.values_vec());
        assert!(spec.pairs.is_empty());
        assert!(spec.p.iter().all(|&b| b == 0));
    }

    #[test]
    fn selection_count_matches_eta() {
        let mut rng = SplitMix64::new(2);
        let x = random_x(&mut rng, 10, 2);
        let (_, spec) = exchange_frames(&x, 20.0, &mut rng);
        assert_eq!(spec.pairs.len(), 1);
        assert_eq!(spec.p.iter().sum::<usize>(), 2);

        // odd floor rounds down to even: 25% of 13 frames = 3.25 -> 2
        let x = random_x(&mut rng, 13, 2);
        let (_, spec) = exchange_frames(&x, 25.0, &mut rng);
        assert_eq!(spec.num_exchanged(), 2);

        // too short for a pair: identity
        let x = random_x(&mut rng, 4, 2);
        let (x_ex, spec) = exchange_frames(&x, 20.0, &mut rng);
        assert_eq!(x_ex.values_vec(), x.values_vec());
        assert_eq!(spec.num_exchanged(), 0);
    }

    #[test]
    fn involution_restores_the_input() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..20 {
            let t = 2 + rng.below(60);
            let x = random_x(&mut rng, t, 4);
            let (x_ex, spec) = exchange_frames(&x, 40.0, &mut rng);
            let restored = spec.apply(&x_ex);
            assert_eq!(restored.values_vec(), x.values_vec());
        }
    }

    #[test]
    fn unselected_rows_are_untouched_and_rows_are_permuted() {
        let mut rng = SplitMix64::new(4);
        let d = 3;
        let x = random_x(&mut rng, 30, d);
        let (x_ex, spec) = exchange_frames(&x, 30.0, &mut rng);
        let xv = x.values_vec();
        let ev = x_ex.values_vec();
        for t in 0..30 {
            if spec.p[t] == 0 {
                assert_eq!(xv[t * d..(t + 1) * d], ev[t * d..(t + 1) * d]);
            } else {
                assert_ne!(xv[t * d..(t + 1) * d], ev[t * d..(t + 1) * d]);
            }
        }
        let sort_rows = |v: &[f64]| {
            let mut rows: Vec<Vec<u64>> = v
                .chunks(d)
                .map(|r| r.iter().map(|x| x.to_bits()).collect())
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(sort_rows(&xv), sort_rows(&ev));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let x = random_x(&mut SplitMix64::new(5), 40, 2);
        let run = || {
            let mut rng = SplitMix64::new(99);
            exchange_frames(&x, 20.0, &mut rng).1
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn per_frame_selection_frequency_is_near_eta() {
        let x = random_x(&mut SplitMix64::new(6), 100, 2);
        let mut rng = SplitMix64::new(7);
        let trials = 2000;
        let mut counts = vec![0usize; 100];
        for _ in 0..trials {
            let (_, spec) = exchange_frames(&x, 20.0, &mut rng);
            assert_eq!(spec.num_exchanged(), 20);
            for (c, &flag) in counts.iter_mut().zip(&spec.p) {
                *c += flag;
            }
        }
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.20).abs() < 0.03, "freq {freq}");
        }
    }

    #[test]
    fn pairings_vary_across_draws() {
        // uniform matching: with 4 chosen from 6 frames, repeated draws
        // must produce more than one distinct pairing
        let x = random_x(&mut SplitMix64::new(8), 6, 2);
        let mut rng = SplitMix64::new(9);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let (_, spec) = exchange_frames(&x, 70.0, &mut rng);
            let mut pairs: Vec<(usize, usize)> = spec
                .pairs
                .iter()
                .map(|&(a, b)| (a.min(b), a.max(b)))
                .collect();
            pairs.sort_unstable();
            seen.insert(pairs);
        }
        assert!(seen.len() > 10, "only {} distinct pairings", seen.len());
    }

    #[test]
    fn head_outputs_distributions_and_zero_weights_are_uniform() {
        let mut rng = SplitMix64::new(10);
        let head = ExchangeHead::<f64>::new("ex", 5, &mut rng);
        let h = random_x(&mut rng, 9, 5);
        let e = head.forward(&h);
        assert_eq!(e.shape(), &[9, 2]);
        for row in e.values_vec().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        let zero = ExchangeHead::<f64> {
            w: Parameter::zeros("z.w", vec![5, 2]),
            b: Parameter::zeros("z.b", vec![2]),
        };
        for v in zero.forward(&h).values().iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(11);
        let head = ExchangeHead::<f64>::new("ex", 4, &mut rng);
        let h = random_x(&mut rng, 6, 4);
        let proj = Tensor::from_vec(vec![6, 2], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let leaves: Vec<Tensor<f64>> = head.params().iter().map(|p| p.tensor().clone()).collect();
        let worst = check_gradients(&leaves, &|| head.forward(&h).mul(&proj).sum());
        assert!(worst < TOLERANCE, "worst rel err {worst}");
    }
}
