use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};

use super::{allocate_rates, next_arrival, Mode, RateState, Sample, SimError, SimReport, SwarmScenario, Trace};
use crate::peer::{rarest_first, Bitfield};

const EV_ARRIVE: u8 = 1;
const EV_PIECE: u8 = 3;
const EV_COMPLETE: u8 = 2;
/// Marks the server as the source of a piece.
const SERVER: usize = usize::MAX;

struct Transfer {
    piece: usize,
    source: usize,
    remaining: f64,
}

struct Run<'a> {
    s: &'a SwarmScenario,
    piece_sizes: Vec<u64>,
    held: Vec<Bitfield>,
    /// Holders of each piece, counting the server.
    availability: Vec<u32>,
    current: Vec<Option<Transfer>>,
    rng: StdRng,
}

impl Run<'_> {
    fn supply(&self, j: usize, arrived: &[bool]) -> f64 {
        if self.s.mode == Mode::Hybrid && arrived[j] {
            self.s.peers[j].up_cap * self.held[j].count() as f64 / self.piece_sizes.len() as f64
        } else {
            0.0
        }
    }

    /// Choose peer `i`'s next piece rarest-first and a source for it,
    /// weighted by each holder's current supply.
    fn assign(&mut self, i: usize, arrived: &[bool]) {
        let held = &self.held[i];
        let seed = self.rng.next_u64();
        let Some(piece) = rarest_first(&self.availability, seed, |p| !held.has(p)) else {
            self.current[i] = None;
            return;
        };
        let mut sources = vec![(SERVER, self.s.server_up)];
        if self.s.mode == Mode::Hybrid {
            for j in (0..self.held.len()).filter(|&j| j != i && self.held[j].has(piece)) {
                sources.push((j, self.supply(j, arrived)));
            }
        }
        let total: f64 = sources.iter().map(|(_, w)| w).sum();
        let mut x = self.rng.random::<f64>() * total;
        let mut source = sources[0].0;
        for (j, w) in sources {
            source = j;
            if x < w {
                break;
            }
            x -= w;
        }
        self.current[i] = Some(Transfer {
            piece,
            source,
            remaining: self.piece_sizes[piece] as f64,
        });
    }
}

pub(super) fn run(s: &SwarmScenario) -> Result<SimReport, SimError> {
    let n = s.peers.len();
    let plen = s.effective_piece_length();
    let count = s.file_size.div_ceil(plen) as usize;
    let piece_sizes: Vec<u64> = (0..count)
        .map(|p| plen.min(s.file_size - p as u64 * plen))
        .collect();
    let down_caps: Vec<f64> = s.peers.iter().map(|p| p.down_cap).collect();
    let series_every = s.series_interval();

    let mut run = Run {
        s,
        piece_sizes,
        held: vec![Bitfield::new(count); n],
        availability: vec![1; count],
        current: (0..n).map(|_| None).collect(),
        rng: StdRng::seed_from_u64(s.rng_seed),
    };
    let mut arrived = vec![false; n];
    let mut completion: Vec<Option<f64>> = vec![None; n];
    let mut downloaded = vec![0u64; n];
    let mut uploaded = vec![0u64; n];
    let mut server_uploaded = 0u64;
    let mut trace = Trace::new(s);
    let mut series = Vec::new();
    let mut last_sample = f64::NEG_INFINITY;
    let mut t = 0.0f64;
    let mut steps = 0u64;

    loop {
        for i in 0..n {
            if !arrived[i] && s.peers[i].arrival <= t {
                arrived[i] = true;
                trace.event(EV_ARRIVE, t, &[i as u64]);
                run.assign(i, &arrived);
            }
        }
        if t - last_sample >= series_every {
            series.push(sample(t, &downloaded, s.file_size, server_uploaded));
            last_sample = t;
        }
        if completion.iter().all(Option::is_some) {
            break;
        }
        let active: Vec<bool> = run.current.iter().map(Option::is_some).collect();
        let upcoming = next_arrival(&s.peers, t);
        if !active.contains(&true) {
            t = upcoming.expect("an incomplete peer has not arrived yet");
            continue;
        }
        let supply: Vec<f64> = (0..n).map(|j| run.supply(j, &arrived)).collect();
        let rates = allocate_rates(&RateState {
            mode: s.mode,
            server_up: s.server_up,
            down_caps: &down_caps,
            supply: &supply,
            active: &active,
        });
        let mut step = f64::INFINITY;
        for (i, tr) in run.current.iter().enumerate() {
            if let Some(tr) = tr {
                step = step.min(tr.remaining / rates[i]);
            }
        }
        let piece_done = step;
        if let Some(a) = upcoming {
            step = step.min(a - t);
        }
        if t + step > s.time_cap {
            return Err(SimError::StalledScenario { time_cap: s.time_cap });
        }
        t += step;
        steps += 1;

        // Pieces finishing at this instant complete in peer order.
        for i in 0..n {
            let Some(tr) = run.current[i].as_mut() else { continue };
            let finishes = step == piece_done && tr.remaining / rates[i] <= piece_done * (1.0 + 1e-12);
            if !finishes {
                tr.remaining -= rates[i] * step;
                continue;
            }
            let tr = run.current[i].take().expect("transfer present");
            let bytes = run.piece_sizes[tr.piece];
            run.held[i].set(tr.piece);
            run.availability[tr.piece] += 1;
            downloaded[i] += bytes;
            if tr.source == SERVER {
                server_uploaded += bytes;
            } else {
                uploaded[tr.source] += bytes;
            }
            let source = if tr.source == SERVER { u64::MAX } else { tr.source as u64 };
            trace.event(EV_PIECE, t, &[i as u64, tr.piece as u64, source]);
            if run.held[i].is_complete() {
                completion[i] = Some(t);
                trace.event(EV_COMPLETE, t, &[i as u64]);
            } else {
                run.assign(i, &arrived);
            }
        }
    }

    let completion: Vec<f64> = completion.into_iter().map(|c| c.unwrap_or(0.0)).collect();
    let makespan = completion.iter().copied().fold(0.0, f64::max);
    series.push(sample(makespan, &downloaded, s.file_size, server_uploaded));
    let total: u64 = downloaded.iter().sum();
    trace.event(0, makespan, &[server_uploaded]);
    Ok(SimReport {
        mode: s.mode,
        fidelity: s.fidelity,
        completion,
        server_uploaded: server_uploaded as f64,
        uploaded: uploaded.into_iter().map(|b| b as f64).collect(),
        downloaded: downloaded.into_iter().map(|b| b as f64).collect(),
        amplification: total as f64 / server_uploaded.max(1) as f64,
        seeders_linger: true,
        makespan,
        steps,
        trace_digest: trace.finish(),
        series,
    })
}

fn sample(t: f64, downloaded: &[u64], size: u64, server_uploaded: u64) -> Sample {
    Sample {
        time: t,
        progress: downloaded.iter().map(|&d| d as f64 / size as f64).collect(),
        server_uploaded: server_uploaded as f64,
    }
}
