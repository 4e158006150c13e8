//! Central finite-difference validation of analytic gradients.

use std::collections::BTreeMap;

use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares the analytic gradient of `loss_fn` against central finite
/// differences at step `h`. `loss_fn` must return `(loss, grads)` where the
/// gradient map covers every entry of `params`.
///
/// Relative error per element is `|ga - gf| / max(|ga|, |gf|, floor)`.
pub fn gradient_check(
    params: &BTreeMap<String, ArrayD<f64>>,
    mut loss_fn: impl FnMut(&BTreeMap<String, ArrayD<f64>>) -> (f64, BTreeMap<String, ArrayD<f64>>),
    h: f64,
    floor: f64,
) -> GradCheckReport {
    let (_, analytic) = loss_fn(params);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, base) in params {
        let ga = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        for idx in 0..base.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            {
                let arr = plus.get_mut(name).unwrap();
                let slice = arr.as_slice_memory_order_mut().unwrap();
                slice[idx] += h;
            }
            {
                let arr = minus.get_mut(name).unwrap();
                let slice = arr.as_slice_memory_order_mut().unwrap();
                slice[idx] -= h;
            }
            let fp = loss_fn(&plus).0;
            let fm = loss_fn(&minus).0;
            let gf = (fp - fm) / (2.0 * h);
            let gav = ga.as_slice_memory_order().unwrap()[idx];
            let rel = (gav - gf).abs() / gav.abs().max(gf.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{idx}]: analytic {gav:.6e} vs fd {gf:.6e}");
            }
        }
    }
    report
}
