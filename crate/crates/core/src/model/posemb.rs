use crate::tensor::Tensor;

/// Fixed 3-D sine-cosine position table `[grid^3, dim]`.
///
/// Each axis gets the largest even share of `dim / 3` channels, half sine
/// and half cosine over geometric frequencies; leftover channels stay zero.
pub fn sincos_3d(grid: usize, dim: usize) -> Tensor {
    let per_axis = (dim / 3) & !1;
    let half = per_axis / 2;
    let n = grid * grid * grid;
    let mut out = vec![0.0; n * dim];
    for p in 0..n {
        let coords = [p / (grid * grid), (p / grid) % grid, p % grid];
        for (a, &c) in coords.iter().enumerate() {
            for i in 0..half {
                let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
                let base = p * dim + a * per_axis;
                out[base + i] = (c as f64 * omega).sin();
                out[base + half + i] = (c as f64 * omega).cos();
            }
        }
    }
    Tensor::new(vec![n, dim], out).expect("table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_and_padding() {
        let t = sincos_3d(4, 32);
        // 10 channels per axis: sin(0) = 0, cos(0) = 1, then two zero pads
        let row = &t.data()[..32];
        for a in 0..3 {
            assert!(row[a * 10..a * 10 + 5].iter().all(|v| *v == 0.0));
            assert!(row[a * 10 + 5..a * 10 + 10].iter().all(|v| *v == 1.0));
        }
        assert_eq!(&row[30..], &[0.0, 0.0]);
    }

    #[test]
    fn rows_are_distinct() {
        let t = sincos_3d(3, 24);
        let rows: Vec<&[f64]> = t.data().chunks(24).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }
}
