use crate::error::{Error, Result};

/// Euclidean projection of `v` onto the probability simplex
/// `{x : x >= 0, sum x = 1}`.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::shape("cannot project an empty vector"));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("entry {i} of simplex projection input")));
    }
    let mut out = v.to_vec();
    let mut scratch = Vec::with_capacity(v.len());
    project_in_place(&mut out, &mut scratch);
    Ok(out)
}

/// In-place variant; `scratch` is reused across calls to avoid allocation.
pub(crate) fn project_in_place(x: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(x);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in scratch.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for xi in x.iter_mut() {
        *xi = (*xi - theta).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_is_fixed_point() {
        let p = vec![0.2, 0.3, 0.5];
        let q = project_simplex(&p).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn clips_dominant_coordinate() {
        assert_eq!(project_simplex(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn shifts_support_uniformly() {
        let q = project_simplex(&[0.5, 0.5, 1.0]).unwrap();
        let expect = [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0];
        for (a, b) in q.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(project_simplex(&[]).is_err());
        assert!(project_simplex(&[f64::NAN, 1.0]).is_err());
    }
}
