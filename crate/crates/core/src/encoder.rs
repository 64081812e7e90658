//! Piecewise convolutional sentence encoder.

use rand::Rng;

use crate::autodiff::{ParamId, Result, Tape, Var};
use crate::embedding::SegmentSpans;
use crate::tensor::Tensor;

/// One filter bank per window width: weights `[count, width, k]`, bias `[count]`.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub banks: Vec<ConvBank>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBank {
    pub width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// One feature map `[count, m]` per bank, in bank order.
pub fn convolve(tape: &mut Tape<'_>, x: Var, bank: &FilterBank) -> Result<Vec<Var>> {
    bank.banks
        .iter()
        .map(|b| {
            let w = tape.param(b.weight);
            let bias = tape.param(b.bias);
            tape.conv1d_same(x, w, bias)
        })
        .collect()
}

/// Max of every feature map over each piece, filter-major within a bank and
/// banks in order. An empty piece contributes 0.
pub fn piecewise_max_pool(tape: &mut Tape<'_>, maps: &[Var], spans: &SegmentSpans) -> Result<Var> {
    let pooled = maps
        .iter()
        .map(|&m| tape.max_pool_ranges(m, &spans.pieces))
        .collect::<Result<Vec<_>>>()?;
    if pooled.len() == 1 {
        Ok(pooled[0])
    } else {
        tape.concat(&pooled)
    }
}

/// Inverted-dropout mask: entries are `0` or `1 / keep`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, keep: f64, rng: &mut R) -> Tensor {
    let scale = 1.0 / keep;
    Tensor::vector(
        (0..len)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect(),
    )
}

/// `p = tanh(piecewise_max_pool(convolve(x)))`, times `mask` when given.
pub fn encode_sentence(
    tape: &mut Tape<'_>,
    x: Var,
    spans: &SegmentSpans,
    bank: &FilterBank,
    mask: Option<Tensor>,
) -> Result<Var> {
    let maps = convolve(tape, x, bank)?;
    let pooled = piecewise_max_pool(tape, &maps, spans)?;
    let p = tape.tanh(pooled);
    match mask {
        Some(mask) => {
            let m = tape.constant(mask);
            tape.mul(p, m)
        }
        None => Ok(p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(ps: &mut ParamStore, width: usize, count: usize, w: Tensor) -> FilterBank {
        let weight = ps.insert(&format!("w{width}"), w).unwrap();
        let bias = ps
            .insert(&format!("b{width}"), Tensor::zeros(&[count]))
            .unwrap();
        FilterBank {
            banks: vec![ConvBank {
                width,
                weight,
                bias,
            }],
        }
    }

    #[test]
    fn zero_input_gives_zero_maps_and_features() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fb = bank(&mut ps, 3, 4, Tensor::uniform(&[4, 3, 5], 1.0, &mut rng));
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::zeros(&[6, 5]));
        let maps = convolve(&mut tape, x, &fb).unwrap();
        assert!(tape.value(maps[0]).data().iter().all(|v| *v == 0.0));
        let spans = SegmentSpans::from_boundaries(1, 3, 6);
        let p = encode_sentence(&mut tape, x, &spans, &fb, None).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0; 12]);
    }

    #[test]
    fn width_one_one_hot_filter_extracts_column() {
        let mut ps = ParamStore::new();
        let mut w = Tensor::zeros(&[1, 1, 3]);
        w.data_mut()[2] = 1.0;
        let fb = bank(&mut ps, 1, 1, w);
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]));
        let maps = convolve(&mut tape, x, &fb).unwrap();
        assert_eq!(tape.value(maps[0]).data(), &[3., 6.]);
    }

    #[test]
    fn pooling_examples() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let map = tape.constant(Tensor::matrix(1, 3, vec![1., 5., 2.]));
        let spans = SegmentSpans::from_boundaries(0, 1, 3);
        let p = piecewise_max_pool(&mut tape, &[map], &spans).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 5., 2.]);

        let inc = tape.constant(Tensor::matrix(1, 7, (0..7).map(f64::from).collect()));
        let spans = SegmentSpans::from_boundaries(2, 4, 7);
        let p = piecewise_max_pool(&mut tape, &[inc], &spans).unwrap();
        assert_eq!(tape.value(p).data(), &[2., 4., 6.]);
    }

    #[test]
    fn empty_third_piece_pools_to_zero() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let map = tape.constant(Tensor::matrix(2, 3, vec![-1., -2., -3., 4., 5., 6.]));
        let spans = SegmentSpans::from_boundaries(0, 2, 3);
        let p = piecewise_max_pool(&mut tape, &[map], &spans).unwrap();
        assert_eq!(tape.value(p).data(), &[-1., -2., 0., 4., 6., 0.]);
    }

    #[test]
    fn unit_keep_dropout_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = dropout_mask(50, 1.0, &mut rng);
        assert!(m.data().iter().all(|v| *v == 1.0));
        let m = dropout_mask(1000, 0.5, &mut rng);
        assert!(m.data().iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = m.data().iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
