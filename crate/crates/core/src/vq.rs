//! Nearest-prototype quantization against a learnable codebook.

use intuition_autograd::{Element, Reduce, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

pub const DEFAULT_CODEBOOK_SIZE: usize = 256;
pub const DEFAULT_BETA: f64 = 0.25;

/// `‖a − b‖²`, accumulated in f64.
pub fn squared_distance<T: Element>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Index of the closest row of a row-major `[k, d]` table and its squared
/// distance. Ties go to the lowest index.
pub fn nearest<T: Element>(table: &[T], d: usize, x: &[T]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, row) in table.chunks_exact(d).enumerate() {
        let dist = squared_distance(x, row);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

/// Nearest-row index for every row of `x`, identical to calling
/// [`nearest`] per row.
///
/// Distances are first screened as `‖x‖² − 2x·c + ‖c‖²` with one matrix
/// product; every row within the rounding bound of the screened minimum is
/// then re-scored exactly, so near-ties resolve as the plain scan would.
pub fn nearest_indices<T: Element>(table: &Tensor<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let d = check_dims(table, x)?;
    let (n, k) = (x.numel() / d, table.shape()[0]);
    let mut dots = vec![T::zero(); n * k];
    T::gemm(n, d, k, x.data(), false, table.data(), true, T::zero(), &mut dots);
    let norm = |row: &[T]| row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    let c_norms: Vec<f64> = table.data().chunks_exact(d).map(norm).collect();
    let c_max = c_norms.iter().copied().fold(0.0, f64::max);
    let slack = 16.0 * d as f64 * T::epsilon().as_f64();
    let mut approx = vec![0.0f64; k];
    Ok(x.data()
        .chunks_exact(d)
        .zip(dots.chunks_exact(k))
        .map(|(row, dot)| {
            let x_norm = norm(row);
            let mut min = f64::INFINITY;
            for ((a, &c), &p) in approx.iter_mut().zip(&c_norms).zip(dot) {
                *a = x_norm - 2.0 * p.as_f64() + c;
                min = min.min(*a);
            }
            let bound = min + slack * (x_norm + c_max) + f64::MIN_POSITIVE;
            let mut best = (0, f64::INFINITY);
            for (j, &a) in approx.iter().enumerate() {
                if a <= bound {
                    let exact = squared_distance(row, &table.data()[j * d..(j + 1) * d]);
                    if exact < best.1 {
                        best = (j, exact);
                    }
                }
            }
            best.0
        })
        .collect())
}

fn check_dims<T: Element>(table: &Tensor<T>, x: &Tensor<T>) -> Result<usize> {
    let d = table.last_dim();
    if table.rank() != 2 || x.last_dim() != d || table.shape()[0] == 0 {
        return Err(Error::Dimension(format!(
            "cannot quantize shape {:?} against codebook {:?}",
            x.shape(),
            table.shape()
        )));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub z_q: Tensor<f32>,
    pub codebook_loss: f32,
    pub commitment_loss: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    vectors: Tensor<f32>,
    usage_counts: Vec<u64>,
}

impl Codebook {
    /// Entries uniform in `[−1/K, 1/K]`.
    pub fn init(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config(format!("codebook size {k}x{d} must be positive")));
        }
        let mut rng = seed::rng(seed, Stream::Codebook);
        let bound = 1.0 / k as f32;
        let vectors = Tensor::from_fn([k, d], |_| rng.random_range(-bound..=bound));
        Self::from_vectors(vectors)
    }

    pub fn from_vectors(vectors: Tensor<f32>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.numel() == 0 {
            return Err(Error::Dimension(format!(
                "codebook must be a non-empty matrix, got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Config("codebook contains non-finite entries".into()));
        }
        let k = vectors.shape()[0];
        Ok(Self {
            vectors,
            usage_counts: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn set_usage_counts(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.size() {
            return Err(Error::Dimension(format!(
                "{} usage counts for {} codebook entries",
                counts.len(),
                self.size()
            )));
        }
        self.usage_counts = counts;
        Ok(())
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    /// Nearest indices without touching the usage tally.
    pub fn lookup(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        nearest_indices(&self.vectors, x)
    }

    pub fn quantize(&mut self, x: &Tensor<f32>) -> Result<QuantizationResult> {
        let d = check_dims(&self.vectors, x)?;
        let indices = nearest_indices(&self.vectors, x)?;
        let distances: Vec<f64> = x
            .data()
            .chunks_exact(d)
            .zip(&indices)
            .map(|(row, &i)| squared_distance(row, self.vectors.row(i)))
            .collect();
        self.record_usage(&indices);
        let mut z = Vec::with_capacity(x.numel());
        for &i in &indices {
            z.extend_from_slice(self.vectors.row(i));
        }
        let z_q = Tensor::new(x.shape(), z)?;
        // Both losses share the forward formula; only gradient routing differs.
        let loss = (distances.iter().sum::<f64>() / x.numel().max(1) as f64) as f32;
        Ok(QuantizationResult {
            indices,
            distances,
            z_q,
            codebook_loss: loss,
            commitment_loss: loss,
        })
    }
}

/// Graph handles produced by quantizing on a tape.
#[derive(Clone, Debug)]
pub struct VqVars {
    pub indices: Vec<usize>,
    /// Selected codebook rows; gradient flows to the codebook.
    pub quantized: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

/// Mean squared error of `a` against a gradient-blocked copy of `b`.
fn anchored_mse<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let anchor = tape.stop_gradient(b);
    let diff = tape.sub(a, anchor)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq, Reduce::All))
}

/// `(‖z_q − sg[x]‖², ‖x − sg[z_q]‖²)`, each averaged over all elements.
pub fn vq_losses<T: Element>(tape: &mut Tape<T>, x: Var, z_q: Var) -> Result<(Var, Var)> {
    let codebook = anchored_mse(tape, z_q, x)?;
    let commitment = anchored_mse(tape, x, z_q)?;
    Ok((codebook, commitment))
}

/// Quantizes each row of `x` against the `[K, D]` codebook variable.
pub fn quantize_on_tape<T: Element>(tape: &mut Tape<T>, x: Var, codebook: Var) -> Result<VqVars> {
    let indices = nearest_indices(tape.value(codebook), tape.value(x))?;
    let quantized = tape.gather(codebook, &indices)?;
    let (codebook_loss, commitment_loss) = vq_losses(tape, x, quantized)?;
    Ok(VqVars {
        indices,
        quantized,
        codebook_loss,
        commitment_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_member_has_zero_distance() {
        let mut cb = Codebook::init(16, 4, 1).unwrap();
        let x = Tensor::new([1, 4], cb.vectors().row(7).to_vec()).unwrap();
        let q = cb.quantize(&x).unwrap();
        assert_eq!(q.indices, vec![7]);
        assert_eq!(q.distances, vec![0.0]);
        assert_eq!(cb.usage_counts()[7], 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let table = Tensor::new(
            [6, 1],
            vec![9.0f32, 9.0, -1.0, 9.0, 9.0, 1.0],
        )
        .unwrap();
        let x = Tensor::new([1, 1], vec![0.0f32]).unwrap();
        assert_eq!(nearest_indices(&table, &x).unwrap(), vec![2]);
    }

    #[test]
    fn init_respects_bound_and_seed() {
        let a = Codebook::init(256, 128, 42).unwrap();
        assert!(a.vectors().data().iter().all(|v| v.abs() <= 1.0 / 256.0));
        assert_eq!(a, Codebook::init(256, 128, 42).unwrap());
        let b = Codebook::init(256, 128, 43).unwrap();
        let differing = a
            .vectors()
            .data()
            .iter()
            .zip(b.vectors().data())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing as f64 >= 0.99 * a.vectors().numel() as f64);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut cb = Codebook::init(4, 3, 0).unwrap();
        assert!(cb.quantize(&Tensor::zeros([2, 2])).is_err());
    }

    #[test]
    fn losses_vanish_when_input_is_a_codeword() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = tape.param(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (cb, cm) = vq_losses(&mut tape, x, z).unwrap();
        assert_eq!(tape.value(cb).item(), 0.0);
        assert_eq!(tape.value(cm).item(), 0.0);
    }

    #[test]
    fn codebook_loss_gradient_skips_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let z = tape.param(Tensor::new([1, 2], vec![0.0, 1.0]).unwrap());
        let (cb, _) = vq_losses(&mut tape, x, z).unwrap();
        tape.backward(cb).unwrap();
        assert!(tape.grad(x).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(tape.grad(z).unwrap().data(), &[-1.0, 1.0]);
    }
}
