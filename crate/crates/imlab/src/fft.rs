//! Cubic 3D FFTs assembled from rustfft line transforms.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

pub(crate) struct Fft3 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: RefCell<Vec<Complex64>>,
    lines: RefCell<Vec<Complex64>>,
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Fft3>>> = RefCell::new(HashMap::new());
}

pub(crate) fn plan(n: usize) -> Rc<Fft3> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                let fwd = planner.plan_fft_forward(n);
                let inv = planner.plan_fft_inverse(n);
                let len = fwd
                    .get_inplace_scratch_len()
                    .max(inv.get_inplace_scratch_len());
                Rc::new(Fft3 {
                    n,
                    fwd,
                    inv,
                    scratch: RefCell::new(vec![Complex64::ZERO; len]),
                    lines: RefCell::new(vec![Complex64::ZERO; n * n]),
                })
            })
            .clone()
    })
}

impl Fft3 {
    /// Unnormalized `Σ_j x_j e^{-2πi n·j/N}` in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.fwd);
    }

    /// Unnormalized `Σ_n x_n e^{+2πi n·j/N}` in place.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inv);
    }

    fn run(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let nn = n * n;
        assert_eq!(data.len(), nn * n, "3D buffer has wrong length");
        let mut scratch = self.scratch.borrow_mut();
        let mut buf = self.lines.borrow_mut();

        fft.process_with_scratch(data, &mut scratch);

        for plane in data.chunks_exact_mut(nn) {
            for j in 0..n {
                for k in 0..n {
                    buf[k * n + j] = plane[j * n + k];
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for j in 0..n {
                for k in 0..n {
                    plane[j * n + k] = buf[k * n + j];
                }
            }
        }

        for j in 0..n {
            for i in 0..n {
                let row = &data[i * nn + j * n..i * nn + j * n + n];
                for k in 0..n {
                    buf[k * n + i] = row[k];
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for i in 0..n {
                let row = &mut data[i * nn + j * n..i * nn + j * n + n];
                for k in 0..n {
                    row[k] = buf[k * n + i];
                }
            }
        }
    }
}
