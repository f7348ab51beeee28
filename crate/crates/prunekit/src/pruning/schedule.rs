/// Cubic sparsity ramp: full density through warmup, cubic interpolation
/// down to the final density, flat through cooldown.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    pub k_final: f64,
    pub warmup_steps: usize,
    pub cooldown_steps: usize,
    pub total_steps: usize,
}

impl SparsitySchedule {
    pub fn density(&self, t: usize) -> f64 {
        schedule_density(self, t)
    }
}

/// k(t) = k_f + (1 − k_f)·(1 − p)³ with p the clamped progress through
/// the ramp between warmup end and cooldown start.
pub fn schedule_density(sched: &SparsitySchedule, t: usize) -> f64 {
    let tw = sched.warmup_steps as f64;
    let tc = sched.cooldown_steps as f64;
    let total = sched.total_steps as f64;
    let t = (t as f64).min(total);
    let ramp = (total - tw - tc).max(0.0);
    let p = if ramp == 0.0 {
        if t <= tw {
            0.0
        } else {
            1.0
        }
    } else {
        ((t - tw) / ramp).clamp(0.0, 1.0)
    };
    sched.k_final + (1.0 - sched.k_final) * (1.0 - p).powi(3)
}
