//! Optimal reciprocal collision avoidance for the observer, following the
//! half-plane construction and incremental linear programs of the reference
//! RVO2 planner.

use serde::{Deserialize, Serialize};

use crate::geometry::{GroundPose, ObserverAction, Vec2};

const LP_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrcaConfig {
    pub radius: f64,
    pub ped_radius: f64,
    pub max_speed: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Extra clearance added to every radius sum while planning.
    pub safety_margin: f64,
    /// Magnitude of the deterministic preferred-velocity rotation that breaks
    /// perfectly symmetric encounters.
    pub tie_break: f64,
    /// Below this speed the heading is kept unchanged.
    pub heading_speed_threshold: f64,
}

impl Default for OrcaConfig {
    fn default() -> Self {
        Self {
            radius: 0.3,
            ped_radius: 0.3,
            max_speed: 1.2,
            horizon: 2.0,
            dt: 0.4,
            safety_margin: 0.2,
            tie_break: 1e-3,
            heading_speed_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrcaAgent {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
    pub max_speed: f64,
    pub pref_velocity: Vec2,
    /// Whether this agent takes half of the avoidance effort. Replayed
    /// pedestrians do not react, so the planning agent takes all of it.
    pub reciprocal: bool,
}

impl OrcaAgent {
    pub fn obstacle(position: Vec2, velocity: Vec2, radius: f64) -> Self {
        Self {
            position,
            velocity,
            radius,
            max_speed: velocity.norm(),
            pref_velocity: velocity,
            reciprocal: false,
        }
    }
}

/// Velocities `v` with `normal · (v − point) ≥ 0` are permitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    pub normal: Vec2,
}

impl HalfPlane {
    fn direction(&self) -> Vec2 {
        Vec2::new(self.normal.y, -self.normal.x)
    }

    fn from_direction(point: Vec2, direction: Vec2) -> Self {
        Self {
            point,
            normal: Vec2::new(-direction.y, direction.x),
        }
    }

    /// Positive when `v` violates the constraint.
    pub fn violation(&self, v: Vec2) -> f64 {
        self.normal.dot(self.point - v)
    }

    pub fn contains(&self, v: Vec2, tol: f64) -> bool {
        self.violation(v) <= tol
    }
}

/// One constraint per neighbor from the velocity obstacle truncated at
/// `horizon`. Overlapping pairs use a constraint that separates them within
/// `dt`.
pub fn orca_halfplanes(
    agent: &OrcaAgent,
    neighbors: &[OrcaAgent],
    horizon: f64,
    dt: f64,
    margin: f64,
) -> Vec<HalfPlane> {
    let inv_horizon = 1.0 / horizon;
    let mut lines = Vec::with_capacity(neighbors.len());
    for other in neighbors {
        let rel_pos = other.position - agent.position;
        let rel_vel = agent.velocity - other.velocity;
        let dist_sq = rel_pos.norm_sq();
        let combined = agent.radius + other.radius + margin;
        let combined_sq = combined * combined;

        let (direction, u);
        if dist_sq > combined_sq {
            let w = rel_vel - rel_pos * inv_horizon;
            let w_len_sq = w.norm_sq();
            let dot1 = w.dot(rel_pos);
            if dot1 < 0.0 && dot1 * dot1 > combined_sq * w_len_sq {
                // closest boundary point lies on the cut-off circle
                let w_len = w_len_sq.sqrt();
                let unit_w = w * (1.0 / w_len);
                direction = Vec2::new(unit_w.y, -unit_w.x);
                u = unit_w * (combined * inv_horizon - w_len);
            } else {
                let leg = (dist_sq - combined_sq).sqrt();
                direction = if rel_pos.det(w) > 0.0 {
                    Vec2::new(
                        rel_pos.x * leg - rel_pos.y * combined,
                        rel_pos.x * combined + rel_pos.y * leg,
                    ) * (1.0 / dist_sq)
                } else {
                    -Vec2::new(
                        rel_pos.x * leg + rel_pos.y * combined,
                        -rel_pos.x * combined + rel_pos.y * leg,
                    ) * (1.0 / dist_sq)
                };
                u = direction * rel_vel.dot(direction) - rel_vel;
            }
        } else {
            let inv_dt = 1.0 / dt;
            let w = rel_vel - rel_pos * inv_dt;
            let w_len = w.norm();
            let unit_w = if w_len > 0.0 {
                w * (1.0 / w_len)
            } else {
                -rel_pos.normalized()
            };
            direction = Vec2::new(unit_w.y, -unit_w.x);
            u = unit_w * (combined * inv_dt - w_len);
        }
        let share = if other.reciprocal { 0.5 } else { 1.0 };
        lines.push(HalfPlane::from_direction(
            agent.velocity + u * share,
            direction,
        ));
    }
    lines
}

fn lp1(
    lines: &[(Vec2, Vec2)],
    line_no: usize,
    radius: f64,
    opt: Vec2,
    direction_opt: bool,
) -> Option<Vec2> {
    let (point, dir) = lines[line_no];
    let dot = point.dot(dir);
    let disc = dot * dot + radius * radius - point.norm_sq();
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut t_left = -dot - sq;
    let mut t_right = -dot + sq;
    for &(pi, di) in &lines[..line_no] {
        let denom = dir.det(di);
        let numer = di.det(point - pi);
        if denom.abs() <= LP_EPSILON {
            if numer < 0.0 {
                return None;
            }
            continue;
        }
        let t = numer / denom;
        if denom >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return None;
        }
    }
    let t = if direction_opt {
        if opt.dot(dir) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        dir.dot(opt - point).clamp(t_left, t_right)
    };
    Some(point + dir * t)
}

/// Returns the index of the first line that could not be satisfied (or
/// `lines.len()` on success) and the best velocity found so far.
fn lp2(lines: &[(Vec2, Vec2)], radius: f64, opt: Vec2, direction_opt: bool) -> (usize, Vec2) {
    let mut result = if direction_opt {
        opt * radius
    } else if opt.norm_sq() > radius * radius {
        opt.normalized() * radius
    } else {
        opt
    };
    for i in 0..lines.len() {
        let (p, d) = lines[i];
        if d.det(p - result) > 0.0 {
            match lp1(lines, i, radius, opt, direction_opt) {
                Some(r) => result = r,
                None => return (i, result),
            }
        }
    }
    (lines.len(), result)
}

fn lp3(lines: &[(Vec2, Vec2)], begin: usize, radius: f64, mut result: Vec2) -> Vec2 {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        let (pi, di) = lines[i];
        if di.det(pi - result) > distance {
            let mut proj = Vec::with_capacity(i);
            for &(pj, dj) in &lines[..i] {
                let determinant = di.det(dj);
                let point = if determinant.abs() <= LP_EPSILON {
                    if di.dot(dj) > 0.0 {
                        continue;
                    }
                    (pi + pj) * 0.5
                } else {
                    pi + di * (dj.det(pi - pj) / determinant)
                };
                proj.push((point, (dj - di).normalized()));
            }
            let (fail, candidate) = lp2(&proj, radius, Vec2::new(-di.y, di.x), true);
            if fail >= proj.len() {
                result = candidate;
            }
            distance = di.det(pi - result);
        }
    }
    result
}

/// Velocity closest to `pref` inside every half-plane and the speed disk.
/// When no such velocity exists, the one minimizing the largest violation.
pub fn solve_velocity_lp(halfplanes: &[HalfPlane], pref: Vec2, max_speed: f64) -> Vec2 {
    let lines: Vec<(Vec2, Vec2)> = halfplanes
        .iter()
        .map(|h| (h.point, h.direction()))
        .collect();
    let (fail, result) = lp2(&lines, max_speed, pref, false);
    if fail < lines.len() {
        lp3(&lines, fail, max_speed, result)
    } else {
        result
    }
}

/// Pose and velocity of the planning observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    pub pose: GroundPose,
    pub velocity: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedStep {
    pub action: ObserverAction,
    pub next: ObserverState,
}

/// Advances the observer one step toward `goal` around the replayed crowd
/// (`(position, velocity)` pairs in world coordinates). `tie_sign` (±1)
/// fixes the direction of the symmetry-breaking rotation.
pub fn plan_observer_step(
    observer: &ObserverState,
    goal: Vec2,
    crowd: &[(Vec2, Vec2)],
    config: &OrcaConfig,
    tie_sign: f64,
) -> PlannedStep {
    let dt = config.dt;
    let pos = observer.pose.position;
    let to_goal = goal - pos;
    let dist = to_goal.norm();
    let mut pref = if dist > 1e-12 {
        to_goal * (config.max_speed.min(dist / dt) / dist)
    } else {
        Vec2::ZERO
    };
    if !crowd.is_empty() {
        pref = pref.rotated(tie_sign * config.tie_break);
    }
    let agent = OrcaAgent {
        position: pos,
        velocity: observer.velocity,
        radius: config.radius,
        max_speed: config.max_speed,
        pref_velocity: pref,
        reciprocal: true,
    };
    let neighbors: Vec<OrcaAgent> = crowd
        .iter()
        .map(|&(p, v)| OrcaAgent::obstacle(p, v, config.ped_radius))
        .collect();
    let lines = orca_halfplanes(&agent, &neighbors, config.horizon, dt, config.safety_margin);
    let velocity = solve_velocity_lp(&lines, pref, config.max_speed);

    let heading = if velocity.norm() > config.heading_speed_threshold {
        GroundPose::heading_facing(velocity)
    } else {
        observer.pose.heading
    };
    let next_pose = GroundPose {
        position: pos + velocity * dt,
        heading,
    };
    PlannedStep {
        action: observer.pose.action_to(&next_pose),
        next: ObserverState {
            pose: next_pose,
            velocity,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleOutcome {
    pub steps: usize,
    pub min_distance: f64,
    pub all_arrived: bool,
}

/// All agents start evenly spaced on a circle, head for the antipodal point
/// and avoid each other reciprocally.
pub fn simulate_antipodal_circle(
    n_agents: usize,
    circle_radius: f64,
    config: &OrcaConfig,
    max_steps: usize,
    tie_sign: f64,
) -> CircleOutcome {
    let mut pos: Vec<Vec2> = (0..n_agents)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n_agents as f64;
            Vec2::new(a.cos(), a.sin()) * circle_radius
        })
        .collect();
    let goals: Vec<Vec2> = pos.iter().map(|&p| -p).collect();
    let mut vel = vec![Vec2::ZERO; n_agents];
    let mut min_distance = f64::INFINITY;
    let arrive = 1e-3;
    let mut steps = 0;
    for _ in 0..max_steps {
        if pos.iter().zip(&goals).all(|(p, g)| p.distance(*g) < arrive) {
            break;
        }
        let mut new_vel = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let to_goal = goals[i] - pos[i];
            let d = to_goal.norm();
            let mut pref = if d > 1e-12 {
                to_goal * (config.max_speed.min(d / config.dt) / d)
            } else {
                Vec2::ZERO
            };
            pref = pref.rotated(tie_sign * config.tie_break);
            let agent = OrcaAgent {
                position: pos[i],
                velocity: vel[i],
                radius: config.radius,
                max_speed: config.max_speed,
                pref_velocity: pref,
                reciprocal: true,
            };
            let others: Vec<OrcaAgent> = (0..n_agents)
                .filter(|&j| j != i)
                .map(|j| OrcaAgent {
                    position: pos[j],
                    velocity: vel[j],
                    radius: config.radius,
                    max_speed: config.max_speed,
                    pref_velocity: Vec2::ZERO,
                    reciprocal: true,
                })
                .collect();
            let lines = orca_halfplanes(
                &agent,
                &others,
                config.horizon,
                config.dt,
                config.safety_margin,
            );
            new_vel.push(solve_velocity_lp(&lines, pref, config.max_speed));
        }
        vel = new_vel;
        for i in 0..n_agents {
            pos[i] += vel[i] * config.dt;
        }
        for i in 0..n_agents {
            for j in i + 1..n_agents {
                min_distance = min_distance.min(pos[i].distance(pos[j]));
            }
        }
        steps += 1;
    }
    CircleOutcome {
        steps,
        min_distance,
        all_arrived: pos.iter().zip(&goals).all(|(p, g)| p.distance(*g) < arrive),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over candidate optima: the preferred velocity, 10⁴
    /// points along each constraint boundary inside the disk, and 10⁴ points
    /// on the disk boundary.
    fn brute_force(lines: &[HalfPlane], pref: Vec2, max_speed: f64) -> Option<Vec2> {
        let n = 10_000;
        let mut candidates = vec![pref];
        for l in lines {
            let d = Vec2::new(l.normal.y, -l.normal.x);
            // chord through the disk, parameterized from the line's point
            // closest to the origin
            let foot = l.point - d * l.point.dot(d);
            for k in 0..=n {
                let t = max_speed * (2.0 * k as f64 / n as f64 - 1.0);
                candidates.push(foot + d * t);
            }
        }
        for k in 0..n {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            candidates.push(Vec2::new(a.cos(), a.sin()) * max_speed);
        }
        candidates
            .into_iter()
            .filter(|&v| {
                v.norm() <= max_speed + 1e-12 && lines.iter().all(|l| l.contains(v, 1e-12))
            })
            .min_by(|a, b| a.distance(pref).total_cmp(&b.distance(pref)))
    }

    #[test]
    fn no_neighbors_no_constraints() {
        let a = OrcaAgent {
            position: Vec2::ZERO,
            velocity: Vec2::ZERO,
            radius: 0.3,
            max_speed: 1.2,
            pref_velocity: Vec2::new(0.0, 1.0),
            reciprocal: true,
        };
        assert!(orca_halfplanes(&a, &[], 2.0, 0.4, 0.0).is_empty());
    }

    #[test]
    fn distant_neighbor_does_not_cut_speed_disk() {
        let a = OrcaAgent {
            position: Vec2::ZERO,
            velocity: Vec2::new(0.0, 1.0),
            radius: 0.3,
            max_speed: 1.2,
            pref_velocity: Vec2::new(0.0, 1.0),
            reciprocal: true,
        };
        let far = OrcaAgent::obstacle(Vec2::new(30.0, 30.0), Vec2::new(0.5, 0.0), 0.3);
        let lines = orca_halfplanes(&a, &[far], 2.0, 0.4, 0.0);
        assert_eq!(lines.len(), 1);
        for i in 0..=40 {
            for j in 0..72 {
                let r = 1.2 * i as f64 / 40.0;
                let t = j as f64 * std::f64::consts::PI / 36.0;
                assert!(lines[0].contains(Vec2::new(t.cos(), t.sin()) * r, 0.0));
            }
        }
        assert_eq!(
            solve_velocity_lp(&lines, a.pref_velocity, 1.2),
            a.pref_velocity
        );
    }

    #[test]
    fn head_on_pair_normal_has_lateral_component() {
        let cfg = OrcaConfig::default();
        let pref = Vec2::new(0.0, 1.2).rotated(cfg.tie_break);
        let a = OrcaAgent {
            position: Vec2::ZERO,
            velocity: pref,
            radius: 0.3,
            max_speed: 1.2,
            pref_velocity: pref,
            reciprocal: true,
        };
        let b = OrcaAgent {
            position: Vec2::new(0.0, 4.0),
            velocity: -pref,
            radius: 0.3,
            max_speed: 1.2,
            pref_velocity: -pref,
            reciprocal: true,
        };
        let la = orca_halfplanes(&a, &[b], cfg.horizon, cfg.dt, 0.0);
        let lb = orca_halfplanes(&b, &[a], cfg.horizon, cfg.dt, 0.0);
        assert!(la[0].normal.x.abs() > 1e-3);
        assert!(lb[0].normal.x.abs() > 1e-3);
        assert!((la[0].normal.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lp_without_constraints() {
        assert_eq!(
            solve_velocity_lp(&[], Vec2::new(0.3, 0.4), 1.2),
            Vec2::new(0.3, 0.4)
        );
        let v = solve_velocity_lp(&[], Vec2::new(3.0, 4.0), 1.0);
        assert!((v - Vec2::new(0.6, 0.8)).norm() < 1e-15);
    }

    #[test]
    fn lp_single_halfplane_projects_onto_boundary() {
        // forbid vy > 0.2
        let h = HalfPlane {
            point: Vec2::new(0.0, 0.2),
            normal: Vec2::new(0.0, -1.0),
        };
        let pref = Vec2::new(0.3, 0.8);
        let v = solve_velocity_lp(&[h], pref, 1.2);
        assert!((v - Vec2::new(0.3, 0.2)).norm() < 1e-12);
        let bf = brute_force(&[h], pref, 1.2).unwrap();
        assert!((v - bf).norm() < 1e-2);
    }

    #[test]
    fn infeasible_program_still_returns_bounded_velocity() {
        // two opposing half-planes with an empty intersection
        let lines = [
            HalfPlane {
                point: Vec2::new(0.5, 0.0),
                normal: Vec2::new(1.0, 0.0),
            },
            HalfPlane {
                point: Vec2::new(-0.5, 0.0),
                normal: Vec2::new(-1.0, 0.0),
            },
        ];
        let v = solve_velocity_lp(&lines, Vec2::new(0.0, 1.0), 1.0);
        assert!(v.norm() <= 1.0 + 1e-9);
        // the least-violating velocity splits the difference
        assert!(v.x.abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn free_walk_matches_hand_computation() {
        let cfg = OrcaConfig::default();
        let obs = ObserverState {
            pose: GroundPose::default(),
            velocity: Vec2::ZERO,
        };
        let step = plan_observer_step(&obs, Vec2::new(0.0, 10.0), &[], &cfg, 1.0);
        assert_eq!(step.action.dtheta, 0.0);
        assert!((step.action.dt - Vec2::new(0.0, 0.48)).norm() < 1e-15);

        let at_goal = plan_observer_step(&obs, Vec2::ZERO, &[], &cfg, 1.0);
        assert_eq!(at_goal.action, ObserverAction::IDENTITY);
    }

    #[test]
    fn progress_without_neighbors() {
        let cfg = OrcaConfig::default();
        let mut obs = ObserverState {
            pose: GroundPose::new(Vec2::ZERO, 0.7).unwrap(),
            velocity: Vec2::ZERO,
        };
        let goal = Vec2::new(8.0, 0.0);
        let bound = (8.0 / (cfg.max_speed * cfg.dt)).ceil() as usize;
        let mut steps = 0;
        while obs.pose.position.distance(goal) > 1e-9 {
            obs = plan_observer_step(&obs, goal, &[], &cfg, 1.0).next;
            steps += 1;
            assert!(steps <= bound);
        }
    }

    #[test]
    fn head_on_pedestrian_is_avoided() {
        let cfg = OrcaConfig::default();
        let mut obs = ObserverState {
            pose: GroundPose::default(),
            velocity: Vec2::ZERO,
        };
        let goal = Vec2::new(0.0, 40.0);
        let ped_vel = Vec2::new(0.0, -1.0);
        let mut min_d = f64::INFINITY;
        for k in 0..100 {
            let ped = Vec2::new(0.0, 20.0) + ped_vel * (k as f64 * cfg.dt);
            let step = plan_observer_step(&obs, goal, &[(ped, ped_vel)], &cfg, 1.0);
            obs = step.next;
            let ped_next = ped + ped_vel * cfg.dt;
            min_d = min_d.min(obs.pose.position.distance(ped_next));
        }
        assert!(min_d > cfg.radius + cfg.ped_radius, "{min_d}");
    }

    #[test]
    fn antipodal_circle_is_safe() {
        let out = simulate_antipodal_circle(8, 8.0, &OrcaConfig::default(), 400, 1.0);
        assert!(out.all_arrived, "{out:?}");
        assert!(out.min_distance > 0.6, "{out:?}");
    }

    fn plane_strategy() -> impl Strategy<Value = HalfPlane> {
        (-1.5..1.5f64, -1.5..1.5f64, 0.0..std::f64::consts::TAU).prop_map(|(x, y, a)| HalfPlane {
            point: Vec2::new(x, y),
            normal: Vec2::new(a.cos(), a.sin()),
        })
    }

    proptest! {
        #[test]
        fn lp_output_is_feasible_and_bounded(
            lines in prop::collection::vec(plane_strategy(), 0..8),
            px in -2.0..2.0f64, py in -2.0..2.0f64,
        ) {
            let pref = Vec2::new(px, py);
            let v = solve_velocity_lp(&lines, pref, 1.2);
            prop_assert!(v.norm() <= 1.2 + 1e-9);
            if let Some(bf) = brute_force(&lines, pref, 1.2) {
                // a sampled feasible point exists, so the program is feasible
                for l in &lines {
                    prop_assert!(l.violation(v) <= 1e-9, "violation {}", l.violation(v));
                }
                prop_assert!(v.distance(pref) <= bf.distance(pref) + 1e-9);
                prop_assert!(v.distance(bf) < 1e-2);
            }
        }
    }
}
