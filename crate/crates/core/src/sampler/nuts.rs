//! Multinomial No-U-Turn transitions with a diagonal mass matrix.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::math::logaddexp;
use crate::model::LogDensity;

/// Energy error above which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    fn energy(&self, inv_mass: &[f64]) -> f64 {
        -self.logp + kinetic(&self.p, inv_mass)
    }
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(pi, m)| pi * pi * m).sum::<f64>()
}

fn sharp(p: &[f64], inv_mass: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_mass).map(|(a, b)| a * b).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One leapfrog step of signed size `eps`. Returns false if the target
/// could not be evaluated at the new position.
pub(crate) fn leapfrog<T: LogDensity + ?Sized>(target: &T, z: &mut Point, eps: f64, inv_mass: &[f64]) -> bool {
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_mass) {
        *q += eps * m * p;
    }
    match target.log_density_grad(&z.q, &mut z.grad) {
        Ok(lp) if lp.is_finite() => z.logp = lp,
        _ => {
            z.logp = f64::NEG_INFINITY;
            return false;
        }
    }
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
    true
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionInfo {
    pub depth: usize,
    pub n_leapfrog: usize,
    pub accept_stat: f64,
    pub divergent: bool,
    pub energy: f64,
}

struct Subtree {
    log_sum_weight: f64,
    sample: Vec<f64>,
    sample_logp: f64,
    sample_grad: Vec<f64>,
    rho: Vec<f64>,
    p_begin: Vec<f64>,
    p_end: Vec<f64>,
    p_sharp_begin: Vec<f64>,
    p_sharp_end: Vec<f64>,
}

struct Builder<'t, T: ?Sized, R: ?Sized> {
    target: &'t T,
    inv_mass: &'t [f64],
    eps: f64,
    h0: f64,
    rng: &'t mut R,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

impl<T: LogDensity + ?Sized, R: Rng + ?Sized> Builder<'_, T, R> {
    /// Extends the trajectory by `2^depth` steps from `z`, which is left at
    /// the new outer edge. `None` signals divergence or an internal U-turn.
    fn build(&mut self, depth: usize, z: &mut Point, direction: f64) -> Option<Subtree> {
        if depth == 0 {
            let ok = leapfrog(self.target, z, direction * self.eps, self.inv_mass);
            self.n_leapfrog += 1;
            let h = if ok { z.energy(self.inv_mass) } else { f64::INFINITY };
            if !h.is_finite() || h - self.h0 > MAX_ENERGY_ERROR {
                self.divergent = true;
                return None;
            }
            let lw = self.h0 - h;
            self.sum_metro += if lw > 0.0 { 1.0 } else { lw.exp() };
            let ps = sharp(&z.p, self.inv_mass);
            return Some(Subtree {
                log_sum_weight: lw,
                sample: z.q.clone(),
                sample_logp: z.logp,
                sample_grad: z.grad.clone(),
                rho: z.p.clone(),
                p_begin: z.p.clone(),
                p_end: z.p.clone(),
                p_sharp_begin: ps.clone(),
                p_sharp_end: ps,
            });
        }
        let left = self.build(depth - 1, z, direction)?;
        let right = self.build(depth - 1, z, direction)?;
        let lsw = logaddexp(left.log_sum_weight, right.log_sum_weight);
        let take_right = self.rng.random::<f64>().ln() < right.log_sum_weight - lsw;
        let rho = add(&left.rho, &right.rho);
        let mut ok = no_u_turn(&left.p_sharp_begin, &right.p_sharp_end, &rho);
        ok &= no_u_turn(&left.p_sharp_begin, &right.p_sharp_begin, &add(&left.rho, &right.p_begin));
        ok &= no_u_turn(&left.p_sharp_end, &right.p_sharp_end, &add(&right.rho, &left.p_end));
        if !ok {
            return None;
        }
        let (sample, sample_logp, sample_grad) = if take_right {
            (right.sample, right.sample_logp, right.sample_grad)
        } else {
            (left.sample, left.sample_logp, left.sample_grad)
        };
        Some(Subtree {
            log_sum_weight: lsw,
            sample,
            sample_logp,
            sample_grad,
            rho,
            p_begin: left.p_begin,
            p_end: right.p_end,
            p_sharp_begin: left.p_sharp_begin,
            p_sharp_end: right.p_sharp_end,
        })
    }
}

/// Current position of a chain together with its cached density.
#[derive(Debug, Clone)]
pub struct Position {
    pub q: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl Position {
    pub fn evaluate<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Option<Self> {
        let mut grad = vec![0.0; q.len()];
        match target.log_density_grad(&q, &mut grad) {
            Ok(logp) if logp.is_finite() => Some(Self { q, logp, grad }),
            _ => None,
        }
    }
}

/// One NUTS transition. A divergent trajectory leaves the position unchanged.
pub fn transition<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    current: &Position,
    eps: f64,
    inv_mass: &[f64],
    max_depth: usize,
    rng: &mut R,
) -> (Position, TransitionInfo) {
    let p0: Vec<f64> = inv_mass
        .iter()
        .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
        .collect();
    let start = Point {
        q: current.q.clone(),
        p: p0,
        grad: current.grad.clone(),
        logp: current.logp,
    };
    let h0 = start.energy(inv_mass);
    let mut minus = start.clone();
    let mut plus = start.clone();
    let mut sample = (current.q.clone(), current.logp, current.grad.clone());
    let mut log_sum_weight = 0.0;
    let mut rho = start.p.clone();
    let mut p_sharp_minus = sharp(&start.p, inv_mass);
    let mut p_sharp_plus = p_sharp_minus.clone();
    let mut p_minus = start.p.clone();
    let mut p_plus = start.p.clone();

    let mut b = Builder {
        target,
        inv_mass,
        eps,
        h0,
        rng,
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };
    let mut depth = 0;
    let max_depth = max_depth.max(1);
    while depth < max_depth {
        let forward = b.rng.random::<f64>() < 0.5;
        let (dir, edge) = if forward { (1.0, &mut plus) } else { (-1.0, &mut minus) };
        let sub = b.build(depth, edge, dir);
        depth += 1;
        let Some(sub) = sub else { break };
        if b.rng.random::<f64>().ln() < sub.log_sum_weight - log_sum_weight {
            sample = (sub.sample.clone(), sub.sample_logp, sub.sample_grad.clone());
        }
        log_sum_weight = logaddexp(log_sum_weight, sub.log_sum_weight);
        let rho_old = std::mem::take(&mut rho);
        rho = add(&rho_old, &sub.rho);
        // old trajectory ordered toward the new subtree
        let (ps_far, ps_near, p_near) = if forward {
            (p_sharp_minus.clone(), p_sharp_plus.clone(), p_plus.clone())
        } else {
            (p_sharp_plus.clone(), p_sharp_minus.clone(), p_minus.clone())
        };
        if forward {
            p_sharp_plus = sub.p_sharp_end.clone();
            p_plus = sub.p_end.clone();
        } else {
            p_sharp_minus = sub.p_sharp_end.clone();
            p_minus = sub.p_end.clone();
        }
        let mut ok = no_u_turn(&p_sharp_minus, &p_sharp_plus, &rho);
        ok &= no_u_turn(&ps_far, &sub.p_sharp_begin, &add(&rho_old, &sub.p_begin));
        ok &= no_u_turn(&ps_near, &sub.p_sharp_end, &add(&sub.rho, &p_near));
        if !ok {
            break;
        }
    }
    let info = TransitionInfo {
        depth,
        n_leapfrog: b.n_leapfrog,
        accept_stat: if b.n_leapfrog > 0 { b.sum_metro / b.n_leapfrog as f64 } else { 0.0 },
        divergent: b.divergent,
        energy: h0,
    };
    if b.divergent {
        return (current.clone(), info);
    }
    let (q, logp, grad) = sample;
    (Position { q, logp, grad }, info)
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance probability crosses 0.8.
pub fn initial_step_size<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    current: &Position,
    eps0: f64,
    inv_mass: &[f64],
    rng: &mut R,
) -> f64 {
    let threshold = 0.8f64.ln();
    let mut eps = eps0;
    let one_step = |eps: f64, rng: &mut R| -> f64 {
        let p: Vec<f64> = inv_mass
            .iter()
            .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
            .collect();
        let mut z = Point {
            q: current.q.clone(),
            p,
            grad: current.grad.clone(),
            logp: current.logp,
        };
        let h0 = z.energy(inv_mass);
        if !leapfrog(target, &mut z, eps, inv_mass) {
            return f64::NEG_INFINITY;
        }
        let dh = h0 - z.energy(inv_mass);
        if dh.is_nan() {
            f64::NEG_INFINITY
        } else {
            dh
        }
    };
    let dh = one_step(eps, rng);
    let direction = if dh > threshold { 1.0 } else { -1.0 };
    for _ in 0..100 {
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        let dh = one_step(eps, rng);
        if direction > 0.0 && !(dh > threshold) {
            break;
        }
        if direction < 0.0 && !(dh < threshold) {
            break;
        }
        if !(1e-8..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-8, 1e7)
}
