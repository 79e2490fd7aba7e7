//! Step-size dual averaging and windowed diagonal mass-matrix estimation.

#[derive(Debug, Clone)]
pub struct DualAverage {
    gamma: f64,
    t0: f64,
    kappa: f64,
    target: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    log_eps: f64,
}

impl DualAverage {
    pub fn new(target: f64, step_size: f64) -> Self {
        let mut da = Self {
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            target,
            mu: 0.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            log_eps: step_size.ln(),
        };
        da.restart(step_size);
        da
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.log_eps = step_size.ln();
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let stat = if accept_stat.is_nan() { 0.0 } else { accept_stat.min(1.0) };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        self.log_eps = x;
        x.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// The averaged iterate used once adaptation stops.
    pub fn final_step_size(&self) -> f64 {
        if self.counter == 0.0 {
            self.current()
        } else {
            self.x_bar.exp()
        }
    }
}

#[derive(Debug, Clone)]
pub struct WelfordVar {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WelfordVar {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, q: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(q) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sample variance shrunk toward 1e-3.
    pub fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }

    pub fn restart(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Fast/slow/fast warmup schedule: an initial buffer, doubling slow windows
/// for the mass matrix, and a terminal buffer for the step size only.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window: usize,
    next_end: usize,
}

impl WindowSchedule {
    pub fn new(n_warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        if init_buffer + term_buffer + base > n_warmup {
            init_buffer = (0.15 * n_warmup as f64) as usize;
            term_buffer = (0.1 * n_warmup as f64) as usize;
            base = n_warmup.saturating_sub(init_buffer + term_buffer);
        }
        Self {
            n_warmup,
            init_buffer,
            term_buffer,
            window: base,
            next_end: (init_buffer + base).saturating_sub(1),
        }
    }

    pub fn in_slow_window(&self, it: usize) -> bool {
        self.window > 0
            && it >= self.init_buffer
            && it + self.term_buffer < self.n_warmup
            && it != self.n_warmup
    }

    /// True when iteration `it` closes a slow window; advances the schedule.
    pub fn end_of_window(&mut self, it: usize) -> bool {
        if self.window == 0 || it != self.next_end || it == self.n_warmup {
            return false;
        }
        let last = self.n_warmup - self.term_buffer - 1;
        if self.next_end != last {
            self.window *= 2;
            self.next_end = it + self.window;
            if self.next_end != last && self.next_end + 2 * self.window >= self.n_warmup - self.term_buffer {
                self.next_end = last;
            }
        }
        true
    }

    pub fn term_buffer(&self) -> usize {
        self.term_buffer
    }
}
