//! Real-valued model of one attention read-out, used to steer the gap
//! between two logits by swapping tokens at chosen positions.
//!
//! With the output `h = sum_j w_j v_j / sum_j w_j` the gap between the
//! logits of `x` and `y` is `sum_j w_j a_j / sum_j w_j` where
//! `a_j = (e_x - e_y) . v_j`. Swapping the token at one position changes a
//! single `(w_j, a_j)` pair, so a candidate swap costs O(1).

use crate::fpnum::{SoftmaxVariant, NO_MAX_CLAMP};
use crate::toylm::{KernelProfile, ModelWeights, Token};

/// A position the tuner may rewrite and the tokens it may put there.
#[derive(Debug, Clone)]
pub(crate) struct Slot {
    pub pos: usize,
    pub candidates: Vec<Token>,
}

/// Pairs of slots considered per round.
const PAIR_POOL: usize = 12;

pub(crate) struct Probe {
    ctx: Vec<Token>,
    half_before: usize,
    nomax: bool,
    // Per-token score and gap contribution, full and half precision.
    score: [Vec<f64>; 2],
    gap: [Vec<f64>; 2],
    w: Vec<f64>,
    a: Vec<f64>,
    num: f64,
    den: f64,
}

impl Probe {
    /// `ctx` ends with the query token. Positions before `half_before` are
    /// read from the half-precision cache.
    pub fn new(
        model: &ModelWeights,
        profile: &KernelProfile,
        ctx: Vec<Token>,
        half_before: usize,
        x: Token,
        y: Token,
    ) -> Self {
        let d = model.d_model;
        let tables = model.tables(profile.linear_for(1), profile.acc);
        let query = *ctx.last().expect("non-empty context") as usize;
        let q = &tables.q[query * d..(query + 1) * d];
        let ex = model.embed.row(x as usize);
        let ey = model.embed.row(y as usize);
        let scale = 1.0 / (d as f64).sqrt();
        let gain = f64::from(model.logit_gain());
        let dot = |a: &[f32], b: &[f32]| {
            a.iter()
                .zip(b)
                .map(|(&u, &v)| f64::from(u) * f64::from(v))
                .sum::<f64>()
        };
        let diff: Vec<f32> = ex.iter().zip(ey).map(|(a, b)| a - b).collect();
        let per_token = |table: &[f32], f: &dyn Fn(&[f32]) -> f64| -> Vec<f64> {
            (0..model.vocab_size)
                .map(|t| f(&table[t * d..(t + 1) * d]))
                .collect()
        };
        let score = [
            per_token(&tables.k, &|k| dot(q, k) * scale),
            per_token(&tables.k_half, &|k| dot(q, k) * scale),
        ];
        let gap = [
            per_token(&tables.v, &|v| gain * dot(&diff, v)),
            per_token(&tables.v_half, &|v| gain * dot(&diff, v)),
        ];
        let mut p = Self {
            ctx,
            half_before,
            nomax: profile.attention_softmax == SoftmaxVariant::NoMaxSubtract,
            score,
            gap,
            w: Vec::new(),
            a: Vec::new(),
            num: 0.0,
            den: 0.0,
        };
        p.refresh();
        p
    }

    pub fn tokens(&self) -> &[Token] {
        &self.ctx
    }

    pub fn margin(&self) -> f64 {
        self.num / self.den
    }

    fn entry(&self, pos: usize, t: Token) -> (f64, f64) {
        let h = usize::from(pos < self.half_before);
        let s = self.score[h][t as usize];
        let clamp = f64::from(NO_MAX_CLAMP);
        let w = if self.nomax {
            (s.clamp(-clamp, clamp) - clamp).exp()
        } else {
            (s - clamp).exp()
        };
        (w, self.gap[h][t as usize])
    }

    fn refresh(&mut self) {
        let (w, a): (Vec<f64>, Vec<f64>) = (0..self.ctx.len())
            .map(|i| self.entry(i, self.ctx[i]))
            .unzip();
        self.num = w.iter().zip(&a).map(|(w, a)| w * a).sum();
        self.den = w.iter().sum();
        self.w = w;
        self.a = a;
    }

    fn after(&self, pos: usize, t: Token) -> f64 {
        let (w, a) = self.entry(pos, t);
        let num = self.num - self.w[pos] * self.a[pos] + w * a;
        let den = self.den - self.w[pos] + w;
        num / den
    }

    fn apply(&mut self, moves: &[(usize, Token)]) {
        for &(pos, t) in moves {
            self.ctx[pos] = t;
        }
        self.refresh();
    }

    /// Coordinate search over single and paired swaps towards `target`.
    pub fn tune(&mut self, slots: &[Slot], target: f64, rounds: usize) {
        for _ in 0..rounds {
            let m = self.margin();
            let r = target - m;
            if r == 0.0 {
                return;
            }
            let deltas: Vec<Vec<(f64, Token)>> = slots
                .iter()
                .map(|s| {
                    let mut v: Vec<(f64, Token)> = s
                        .candidates
                        .iter()
                        .map(|&t| (self.after(s.pos, t) - m, t))
                        .collect();
                    v.sort_by(|a, b| a.0.total_cmp(&b.0));
                    v
                })
                .collect();
            let mut best_err = r.abs();
            let mut best: Vec<(usize, Token)> = Vec::new();
            for (i, d) in deltas.iter().enumerate() {
                if let Some(&(dv, t)) = closest(d, r) {
                    if (r - dv).abs() < best_err {
                        best_err = (r - dv).abs();
                        best = vec![(slots[i].pos, t)];
                    }
                }
            }
            let spread = |i: usize| {
                deltas[i].last().map_or(0.0, |x| x.0) - deltas[i].first().map_or(0.0, |x| x.0)
            };
            let mut order: Vec<usize> = (0..slots.len()).filter(|&i| deltas[i].len() > 1).collect();
            order.sort_by(|&a, &b| spread(a).total_cmp(&spread(b)));
            let start = order
                .iter()
                .position(|&i| spread(i) >= 0.5 * r.abs())
                .unwrap_or(order.len().saturating_sub(PAIR_POOL));
            let pool = &order[start..(start + PAIR_POOL).min(order.len())];
            for (ai, &i) in pool.iter().enumerate() {
                for &j in &pool[ai + 1..] {
                    let (di, dj) = (&deltas[i], &deltas[j]);
                    let (mut p, mut q) = (0usize, dj.len() - 1);
                    loop {
                        let s = di[p].0 + dj[q].0;
                        if (r - s).abs() < best_err {
                            best_err = (r - s).abs();
                            best = vec![(slots[i].pos, di[p].1), (slots[j].pos, dj[q].1)];
                        }
                        if s < r {
                            p += 1;
                            if p == di.len() {
                                break;
                            }
                        } else {
                            if q == 0 {
                                break;
                            }
                            q -= 1;
                        }
                    }
                }
            }
            if best.is_empty() {
                return;
            }
            let undo: Vec<(usize, Token)> =
                best.iter().map(|&(pos, _)| (pos, self.ctx[pos])).collect();
            self.apply(&best);
            if (target - self.margin()).abs() >= r.abs() {
                self.apply(&undo);
                return;
            }
        }
    }
}

fn closest(sorted: &[(f64, Token)], r: f64) -> Option<&(f64, Token)> {
    let i = sorted.partition_point(|x| x.0 < r);
    let lo = i.checked_sub(1).and_then(|k| sorted.get(k));
    match (lo, sorted.get(i)) {
        (Some(a), Some(b)) => Some(if (r - a.0).abs() <= (b.0 - r).abs() {
            a
        } else {
            b
        }),
        (a, b) => a.or(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::{self, init_model, ExecPolicy};

    #[test]
    fn probe_tracks_exact_gap() {
        let model = init_model(42, 256, 64);
        let layout = model.layout().unwrap().clone();
        let mut t = layout.system_prefix();
        t.extend([
            layout.filler.start + 3,
            layout.rare.start + 1,
            layout.filler.start + 9,
        ]);
        t.extend([
            layout.rare.start + 7,
            layout.pattern.start + 2,
            toylm::special::RETRIEVE,
        ]);
        let profile = KernelProfile::reference();
        let (x, y) = (layout.rare.start + 1, layout.rare.start + 7);
        let probe = Probe::new(&model, &profile, t.clone(), 0, x, y);
        let (_, logits) = toylm::prefill(&model, &t, &profile, &ExecPolicy::single_pass()).unwrap();
        let exact = f64::from(logits[x as usize] - logits[y as usize]);
        assert!(
            (probe.margin() - exact).abs() < 1e-3,
            "{} vs {exact}",
            probe.margin()
        );
    }

    #[test]
    fn tuning_reaches_target() {
        let model = init_model(7, 256, 64);
        let layout = model.layout().unwrap().clone();
        let mut t = layout.system_prefix();
        let body_start = t.len();
        for i in 0..30 {
            t.push(layout.filler.start + i);
        }
        for (i, pos) in [2, 4, 12, 16, 24, 28].into_iter().enumerate() {
            t[body_start + pos] = layout.pattern.start + i as Token;
        }
        t[body_start + 8] = layout.rare.start;
        t[body_start + 20] = layout.rare.start + 5;
        t.push(toylm::special::RETRIEVE);
        let slots: Vec<Slot> = (body_start..body_start + 30)
            .filter(|p| ![body_start + 8, body_start + 20].contains(p))
            .map(|pos| Slot {
                pos,
                candidates: if layout.class(t[pos]) == toylm::TokenClass::Pattern {
                    layout.pattern.clone().collect()
                } else {
                    layout.filler.clone().collect()
                },
            })
            .collect();
        let mut probe = Probe::new(
            &model,
            &KernelProfile::reference(),
            t,
            0,
            layout.rare.start,
            layout.rare.start + 5,
        );
        let before = (probe.margin() - 3e-5).abs();
        probe.tune(&slots, 3e-5, 24);
        let after = (probe.margin() - 3e-5).abs();
        assert!(after < 1e-5 && after < before * 1e-3, "{before} -> {after}");
    }
}
