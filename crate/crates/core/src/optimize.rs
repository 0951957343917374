//! Small derivative-free optimizers used by calibration and estimation.

/// Result of a bounded one-dimensional search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Brent's method: golden-section search with parabolic interpolation.
/// Minimizes `f` on `[a, b]` to absolute tolerance `tol` in `x`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Extremum {
    assert!(a <= b, "invalid bracket [{a}, {b}]");
    let (mut a, mut b) = (a, b);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut evaluations = 1;
    for _ in 0..500 {
        let m = 0.5 * (a + b);
        let tol1 = tol.max(f64::EPSILON * x.abs()) / 3.0 + 1e-15;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        evaluations += 1;
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Extremum { x, value: fx, evaluations }
}

/// Maximizes `f` on `[a, b]`; the endpoints themselves are also checked so
/// that boundary maxima are returned exactly.
pub fn brent_maximize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Extremum {
    let inner = brent_minimize(|x| -f(x), a, b, tol);
    let mut best = Extremum { x: inner.x, value: -inner.value, evaluations: inner.evaluations + 2 };
    for edge in [a, b] {
        let fe = f(edge);
        if fe > best.value || (fe == best.value && (edge - best.x).abs() <= tol) {
            best.x = edge;
            best.value = fe;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Nelder-Mead minimization inside the box `[lower, upper]`; trial points
/// are clipped onto the box.
pub fn nelder_mead_box<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: &[f64],
    lower: &[f64],
    upper: &[f64],
    tol: f64,
    max_iter: usize,
) -> NelderMeadResult {
    let dim = start.len();
    let clip = |p: &mut Vec<f64>| {
        for i in 0..dim {
            p[i] = p[i].clamp(lower[i], upper[i]);
        }
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    let mut s0 = start.to_vec();
    clip(&mut s0);
    simplex.push(s0.clone());
    for i in 0..dim {
        let mut p = s0.clone();
        p[i] += step[i];
        if p[i] > upper[i] {
            p[i] = s0[i] - step[i];
        }
        clip(&mut p);
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = (values[dim] - values[0]).abs();
        let size =
            simplex[1..].iter().flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        if spread <= tol * (values[0].abs() + tol) && size <= tol.sqrt() {
            break;
        }

        let centroid: Vec<f64> =
            (0..dim).map(|i| simplex[..dim].iter().map(|p| p[i]).sum::<f64>() / dim as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..dim).map(|i| centroid[i] + t * (simplex[dim][i] - centroid[i])).collect();
            clip(&mut p);
            p
        };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
        } else if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
        } else {
            let contracted = if fr < values[dim] { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            if fc < values[dim].min(fr) {
                simplex[dim] = contracted;
                values[dim] = fc;
            } else {
                let best = simplex[0].clone();
                for k in 1..=dim {
                    let mut p: Vec<f64> = (0..dim).map(|i| best[i] + 0.5 * (simplex[k][i] - best[i])).collect();
                    clip(&mut p);
                    values[k] = f(&p);
                    simplex[k] = p;
                }
            }
        }
    }
    let best = (0..=dim).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap();
    NelderMeadResult { x: simplex[best].clone(), value: values[best], iterations }
}
