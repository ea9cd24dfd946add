//! Streaming statistics: Welford accumulators and time-indexed estimate series.
//!
//! Accumulators merge associatively, so ensembles can be reduced chunk by chunk
//! in a fixed order that does not depend on the number of worker threads.

/// Single-pass mean/variance accumulator (count, mean, sum of squared deviations).
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Combines two accumulators as if all samples had been pushed into one.
    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let n = n1 + n2;
        let d = other.mean - self.mean;
        self.mean += d * n2 / n;
        self.m2 += other.m2 + d * d * n1 * n2 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count as f64 - 1.0)
        }
    }

    /// Standard error of the mean; 0 for fewer than two samples.
    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// A time-indexed series of ensemble estimates with per-point standard errors.
#[derive(Clone, Debug)]
pub struct EstimateSeries {
    times: Vec<f64>,
    acc: Vec<Welford>,
}

impl EstimateSeries {
    pub fn new(times: Vec<f64>) -> Self {
        let acc = vec![Welford::new(); times.len()];
        Self { times, acc }
    }

    /// Wraps exact values (no sampling error), e.g. analytic reference curves.
    pub fn from_exact(times: Vec<f64>, values: &[f64]) -> Self {
        assert_eq!(times.len(), values.len());
        let mut s = Self::new(times);
        for (a, &v) in s.acc.iter_mut().zip(values) {
            a.push(v);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn push_sample(&mut self, idx: usize, x: f64) {
        self.acc[idx].push(x);
    }

    /// Pushes one sample per time point, in order.
    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.acc.len());
        for (a, &x) in self.acc.iter_mut().zip(row) {
            a.push(x);
        }
    }

    /// Point-wise merge of another series over the same time grid.
    pub fn merge(&mut self, other: &EstimateSeries) {
        assert_eq!(self.times.len(), other.times.len());
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            a.merge(b);
        }
    }

    pub fn estimate(&self, idx: usize) -> f64 {
        self.acc[idx].mean()
    }

    pub fn stderr(&self, idx: usize) -> f64 {
        self.acc[idx].stderr()
    }

    pub fn n_samples(&self, idx: usize) -> u64 {
        self.acc[idx].count()
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.acc.iter().map(|a| a.mean()).collect()
    }

    /// Index of the grid point closest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let mut best = 0;
        let mut err = f64::INFINITY;
        for (i, &ti) in self.times.iter().enumerate() {
            let e = (ti - t).abs();
            if e < err {
                err = e;
                best = i;
            }
        }
        best
    }

    /// CSV rendering with the shortest decimal that round-trips each value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,estimate,stderr,n_samples\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.times[i],
                self.acc[i].mean(),
                self.acc[i].stderr(),
                self.acc[i].count()
            ));
        }
        out
    }

    /// Drops trailing points once the relative standard error exceeds `cap`.
    /// Points with |estimate| below `floor` are kept (a zero signal has no
    /// meaningful relative error).
    pub fn truncate_by_relative_stderr(&mut self, cap: f64, floor: f64) {
        let mut keep = self.times.len();
        for i in 0..self.times.len() {
            let m = self.acc[i].mean().abs();
            if m > floor && self.acc[i].stderr() > cap * m {
                keep = i;
                break;
            }
        }
        self.times.truncate(keep);
        self.acc.truncate(keep);
    }
}
