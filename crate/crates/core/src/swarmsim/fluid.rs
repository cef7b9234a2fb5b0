use super::{allocate_rates, next_arrival, Mode, RateState, Sample, SimError, SimReport, SwarmScenario, Trace};

const EV_ARRIVE: u8 = 1;
const EV_COMPLETE: u8 = 2;

pub(super) fn run(s: &SwarmScenario) -> Result<SimReport, SimError> {
    let n = s.peers.len();
    let size = s.file_size as f64;
    let dt = s.effective_dt();
    let down_caps: Vec<f64> = s.peers.iter().map(|p| p.down_cap).collect();
    let series_every = s.series_interval().max(dt);

    let mut have = vec![0.0f64; n];
    let mut completion: Vec<Option<f64>> = vec![None; n];
    let mut from_server = vec![0.0f64; n];
    let mut uploaded = vec![0.0f64; n];
    let mut arrived = vec![false; n];
    let mut trace = Trace::new(s);
    let mut series = Vec::new();
    let mut last_sample = f64::NEG_INFINITY;
    let mut t = 0.0f64;
    let mut steps = 0u64;

    loop {
        for (i, p) in s.peers.iter().enumerate() {
            if !arrived[i] && p.arrival <= t {
                arrived[i] = true;
                trace.event(EV_ARRIVE, t, &[i as u64]);
            }
        }
        if t - last_sample >= series_every {
            series.push(sample(t, &have, size, s.mode, &from_server));
            last_sample = t;
        }
        if completion.iter().all(Option::is_some) {
            break;
        }
        if t > s.time_cap {
            return Err(SimError::StalledScenario { time_cap: s.time_cap });
        }
        let active: Vec<bool> = (0..n).map(|i| arrived[i] && completion[i].is_none()).collect();
        let upcoming = next_arrival(&s.peers, t);
        if !active.contains(&true) {
            t = upcoming.expect("an incomplete peer has not arrived yet");
            continue;
        }
        let supply: Vec<f64> = (0..n)
            .map(|j| {
                let present = arrived[j] && (completion[j].is_none() || s.seed_after);
                if s.mode == Mode::Hybrid && present {
                    s.peers[j].up_cap * have[j] / size
                } else {
                    0.0
                }
            })
            .collect();
        let state = RateState {
            mode: s.mode,
            server_up: s.server_up,
            down_caps: &down_caps,
            supply: &supply,
            active: &active,
        };
        let rates = allocate_rates(&state);
        let pool = state.pool();
        let step = upcoming.map_or(dt, |a| dt.min(a - t));

        // Per-unit-supply upload owed by every source, so that peer j's
        // upload is supply[j] * sum over downloaders i != j of inc_i / (pool - supply_i).
        let mut weight_sum = 0.0;
        let mut weights = vec![0.0; n];
        let mut finished = Vec::new();
        for i in (0..n).filter(|&i| active[i]) {
            let r = rates[i];
            let mut inc = r * step;
            if have[i] + inc >= size {
                inc = size - have[i];
                finished.push((i, t + inc / r));
            }
            have[i] += inc;
            from_server[i] += inc * state.server_share(pool, i);
            if s.mode == Mode::Hybrid {
                weights[i] = inc / (pool - supply[i]);
                weight_sum += weights[i];
            }
        }
        if s.mode == Mode::Hybrid {
            for j in 0..n {
                if supply[j] > 0.0 {
                    uploaded[j] += supply[j] * (weight_sum - weights[j]);
                }
            }
        }
        for (i, at) in finished {
            have[i] = size;
            completion[i] = Some(at);
            trace.event(EV_COMPLETE, at, &[i as u64]);
        }
        t += step;
        steps += 1;
    }

    let completion: Vec<f64> = completion.into_iter().map(|c| c.unwrap_or(0.0)).collect();
    let makespan = completion.iter().copied().fold(0.0, f64::max);
    series.push(sample(makespan, &have, size, s.mode, &from_server));
    let server_uploaded = server_total(s.mode, &have, &from_server);
    let downloaded = have;
    let total: f64 = downloaded.iter().sum();
    trace.event(0, makespan, &[server_uploaded.to_bits()]);
    Ok(SimReport {
        mode: s.mode,
        fidelity: s.fidelity,
        completion,
        server_uploaded,
        uploaded,
        downloaded,
        amplification: total / server_uploaded,
        seeders_linger: s.seed_after,
        makespan,
        steps,
        trace_digest: trace.finish(),
        series,
    })
}

/// In `http_only` every downloaded byte came from the server; summing the
/// same values keeps the amplification at exactly one. In `hybrid` a peer's
/// server bytes are capped at what it holds, since the server share can
/// round a hair above one.
fn server_total(mode: Mode, have: &[f64], from_server: &[f64]) -> f64 {
    match mode {
        Mode::HttpOnly => have.iter().sum(),
        Mode::Hybrid => from_server.iter().zip(have).map(|(s, h)| s.min(*h)).sum(),
    }
}

fn sample(t: f64, have: &[f64], size: f64, mode: Mode, from_server: &[f64]) -> Sample {
    Sample {
        time: t,
        progress: have.iter().map(|h| h / size).collect(),
        server_uploaded: server_total(mode, have, from_server),
    }
}
