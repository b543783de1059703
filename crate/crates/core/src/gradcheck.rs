//! Central-difference gradient verification.

use crate::tensor::Tensor;

/// Where in a flat parameter list a checked coordinate lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct CoordinateError {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<CoordinateError>,
    pub checked: usize,
}

/// `|analytic − numeric| / max(|numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compare analytic gradients against central differences of `loss_fn`.
///
/// `values` is perturbed in place and restored after each probe, so
/// `loss_fn` must be deterministic and free of side effects.
pub fn finite_diff_check<F>(
    values: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    coordinates: &[Coordinate],
    mut loss_fn: F,
    step: f64,
) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &c in coordinates {
        let original = values[c.param].data()[c.index];
        values[c.param].data_mut()[c.index] = original + step;
        let plus = loss_fn(values);
        values[c.param].data_mut()[c.index] = original - step;
        let minus = loss_fn(values);
        values[c.param].data_mut()[c.index] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[c.param].data()[c.index];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(CoordinateError {
                coordinate: c,
                analytic: a,
                numeric,
                relative_error: err,
            });
        }
    }
    report
}

/// Every coordinate of every tensor.
pub fn all_coordinates(values: &[Tensor<f64>]) -> Vec<Coordinate> {
    values
        .iter()
        .enumerate()
        .flat_map(|(param, t)| (0..t.len()).map(move |index| Coordinate { param, index }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut values = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let analytic = vec![Tensor::from_vec(&[1], vec![2.0]).unwrap()];
        let coords = all_coordinates(&values);
        let report = finite_diff_check(
            &mut values,
            &analytic,
            &coords,
            |v| v[0].data()[0].powi(2),
            1e-3,
        );
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(values[0].data()[0], 1.0);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut values = vec![Tensor::from_vec(&[3], vec![0.5, -2.0, 4.0]).unwrap()];
        let analytic = vec![Tensor::zeros(&[3])];
        let coords = all_coordinates(&values);
        let report = finite_diff_check(&mut values, &analytic, &coords, |_| 7.25, 1e-3);
        assert_eq!(report.max_relative_error, 0.0);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut values = vec![Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()];
        let analytic = vec![Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap()];
        let coords = all_coordinates(&values);
        let report = finite_diff_check(
            &mut values,
            &analytic,
            &coords,
            |v| v[0].data().iter().map(|x| x * x).sum(),
            1e-3,
        );
        let worst = report.worst.unwrap();
        assert_eq!(worst.coordinate, Coordinate { param: 0, index: 1 });
        assert!((worst.relative_error - 0.25).abs() < 1e-6);
    }
}
