//! Conversation traces: loading, synthetic generation and workload statistics.
//!
//! A trace is a list of sessions, each an ordered list of turns carrying the
//! number of new input tokens and generated tokens. Only token counts matter.
//! Arrival timestamps are always synthesized: sessions start with exponential
//! gaps, and each later turn carries a nominal arrival time whose distance to
//! the previous turn is the user's think time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace contains no conversations")]
    EmptyTrace,
    #[error("conversation `{0}` has no turns")]
    ZeroTurns(String),
    #[error("conversation `{id}` turn {turn}: input must be at least one token")]
    ZeroInput { id: String, turn: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub new_input_tokens: u32,
    pub output_tokens: u32,
}

impl Turn {
    pub fn total(&self) -> u64 {
        u64::from(self.new_input_tokens) + u64::from(self.output_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub turns: Vec<Turn>,
    /// Nominal per-turn timestamps. Entry 0 is the session's real arrival;
    /// for later turns only the gap to the previous entry (the think time) is
    /// used by the simulator, which starts the clock at the previous turn's
    /// completion.
    pub arrival_times: Vec<f64>,
}

impl Session {
    pub fn total_tokens(&self) -> u64 {
        self.turns.iter().map(Turn::total).sum()
    }

    /// Think time before turn `k` (k ≥ 1).
    pub fn think_time(&self, k: usize) -> f64 {
        self.arrival_times[k] - self.arrival_times[k - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRef {
    pub time: f64,
    pub session: usize,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub sessions: Vec<Session>,
    /// All nominal arrivals ordered by time, ties broken by (session id, turn).
    pub merged_arrivals: Vec<ArrivalRef>,
}

impl Workload {
    pub fn from_sessions(sessions: Vec<Session>) -> Workload {
        let mut merged: Vec<ArrivalRef> = sessions
            .iter()
            .enumerate()
            .flat_map(|(si, s)| {
                s.arrival_times
                    .iter()
                    .enumerate()
                    .map(move |(ti, &time)| ArrivalRef { time, session: si, turn: ti })
            })
            .collect();
        merged.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then_with(|| sessions[a.session].id.cmp(&sessions[b.session].id))
                .then_with(|| a.turn.cmp(&b.turn))
        });
        Workload { sessions, merged_arrivals: merged }
    }

    pub fn total_turns(&self) -> usize {
        self.sessions.iter().map(|s| s.turns.len()).sum()
    }
}

/// Think-time distribution between consecutive turns of one session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThinkDist {
    Exponential { mean: f64 },
    Uniform { low: f64, high: f64 },
    Fixed { seconds: f64 },
    LogNormal { median: f64, sigma: f64 },
}

impl Default for ThinkDist {
    fn default() -> Self {
        ThinkDist::Exponential { mean: 60.0 }
    }
}

impl ThinkDist {
    fn validate(&self) -> Result<(), TraceError> {
        let ok = match *self {
            ThinkDist::Exponential { mean } => mean > 0.0 && mean.is_finite(),
            ThinkDist::Uniform { low, high } => low >= 0.0 && high >= low && high.is_finite(),
            ThinkDist::Fixed { seconds } => seconds >= 0.0 && seconds.is_finite(),
            ThinkDist::LogNormal { median, sigma } => median > 0.0 && median.is_finite() && (0.0..=10.0).contains(&sigma),
        };
        if ok {
            Ok(())
        } else {
            Err(TraceError::InvalidArgument(format!("bad think-time distribution {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        // A zero think time would make a turn's nominal arrival coincide with
        // its predecessor's; keep timestamps strictly increasing.
        let t = match *self {
            ThinkDist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            ThinkDist::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..high)
                } else {
                    low
                }
            }
            ThinkDist::Fixed { seconds } => seconds,
            ThinkDist::LogNormal { median, sigma } => LogNormal::new(median.ln(), sigma).expect("validated").sample(rng),
        };
        t.max(1e-3)
    }
}

/// Number of turns per session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnDist {
    Fixed { turns: u32 },
    /// Single-turn with probability `single_turn`, otherwise `2 + Geometric`
    /// with the given mean for the geometric part, capped at `max_turns`.
    ShareGpt { single_turn: f64, extra_mean: f64, max_turns: u32 },
}

impl Default for TurnDist {
    fn default() -> Self {
        // 27% single turn; multi-turn mean 7.5 turns, overall mean ≈ 5.75
        TurnDist::ShareGpt { single_turn: 0.27, extra_mean: 5.6, max_turns: 60 }
    }
}

impl TurnDist {
    fn validate(&self) -> Result<(), TraceError> {
        let ok = match *self {
            TurnDist::Fixed { turns } => turns >= 1,
            TurnDist::ShareGpt { single_turn, extra_mean, max_turns } => {
                (0.0..=1.0).contains(&single_turn) && extra_mean >= 0.0 && extra_mean.is_finite() && max_turns >= 2
            }
        };
        if ok {
            Ok(())
        } else {
            Err(TraceError::InvalidArgument(format!("bad turn distribution {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match *self {
            TurnDist::Fixed { turns } => turns,
            TurnDist::ShareGpt { single_turn, extra_mean, max_turns } => {
                if rng.random::<f64>() < single_turn {
                    return 1;
                }
                let extra = if extra_mean > 0.0 {
                    let p = 1.0 / (1.0 + extra_mean);
                    Geometric::new(p).expect("p in (0,1]").sample(rng)
                } else {
                    0
                };
                (2 + extra.min(u64::from(max_turns))).min(u64::from(max_turns)) as u32
            }
        }
    }
}

/// Per-turn token counts: independent log-normals for input and output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDist {
    pub input_median: f64,
    pub input_sigma: f64,
    pub output_median: f64,
    pub output_sigma: f64,
    pub max_tokens: u32,
}

impl Default for TokenDist {
    fn default() -> Self {
        TokenDist {
            input_median: 140.0,
            input_sigma: 1.3,
            output_median: 260.0,
            output_sigma: 0.8,
            max_tokens: 2048,
        }
    }
}

impl TokenDist {
    fn validate(&self) -> Result<(), TraceError> {
        let ok = self.input_median >= 1.0
            && self.output_median >= 0.0
            && self.input_sigma >= 0.0
            && self.output_sigma >= 0.0
            && self.max_tokens >= 1;
        if ok {
            Ok(())
        } else {
            Err(TraceError::InvalidArgument(format!("bad token distribution {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Turn {
        let draw = |rng: &mut R, median: f64, sigma: f64| -> f64 {
            if median <= 0.0 {
                return 0.0;
            }
            LogNormal::new(median.ln(), sigma).expect("validated").sample(rng)
        };
        let cap = f64::from(self.max_tokens);
        let input = draw(rng, self.input_median, self.input_sigma).round().clamp(1.0, cap) as u32;
        let output = draw(rng, self.output_median, self.output_sigma).round().clamp(0.0, cap) as u32;
        Turn { new_input_tokens: input, output_tokens: output }
    }
}

/// How timestamps are synthesized for a workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalModel {
    /// New sessions per second.
    pub rate: f64,
    pub think: ThinkDist,
    pub seed: u64,
}

impl Default for ArrivalModel {
    fn default() -> Self {
        ArrivalModel { rate: 1.0, think: ThinkDist::default(), seed: 0 }
    }
}

/// Full parameter set of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sessions: usize,
    pub rate: f64,
    #[serde(default)]
    pub turns: TurnDist,
    #[serde(default)]
    pub tokens: TokenDist,
    #[serde(default)]
    pub think: ThinkDist,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sessions: 2000,
            rate: 1.0,
            turns: TurnDist::default(),
            tokens: TokenDist::default(),
            think: ThinkDist::default(),
        }
    }
}

fn assign_arrivals(convs: Vec<(String, Vec<Turn>)>, model: &ArrivalModel) -> Result<Workload, TraceError> {
    if !(model.rate > 0.0 && model.rate.is_finite()) {
        return Err(TraceError::InvalidArgument(format!("arrival rate must be positive, got {}", model.rate)));
    }
    model.think.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let gap = Exp::new(model.rate).expect("rate checked");
    let mut clock = 0.0;
    let sessions = convs
        .into_iter()
        .map(|(id, turns)| {
            clock += gap.sample(&mut rng);
            let mut t = clock;
            let mut arrival_times = Vec::with_capacity(turns.len());
            for k in 0..turns.len() {
                if k > 0 {
                    t += model.think.sample(&mut rng);
                }
                arrival_times.push(t);
            }
            Session { id, turns, arrival_times }
        })
        .collect();
    Ok(Workload::from_sessions(sessions))
}

/// Draws a synthetic ShareGPT-shaped workload.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Workload, TraceError> {
    if spec.sessions == 0 {
        return Err(TraceError::InvalidArgument("need at least one session".into()));
    }
    spec.turns.validate()?;
    spec.tokens.validate()?;
    // Separate streams so changing the think-time law leaves token counts alone.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = spec.sessions.to_string().len().max(6);
    let convs = (0..spec.sessions)
        .map(|i| {
            let n = spec.turns.sample(&mut rng);
            let turns = (0..n).map(|_| spec.tokens.sample(&mut rng)).collect();
            (format!("s{i:0width$}"), turns)
        })
        .collect();
    assign_arrivals(
        convs,
        &ArrivalModel { rate: spec.rate, think: spec.think, seed: seed ^ 0x9e37_79b9_7f4a_7c15 },
    )
}

/// Poisson session arrivals with default think times.
pub fn generate_poisson(
    n_sessions: usize,
    rate: f64,
    turn_dist: TurnDist,
    token_dist: TokenDist,
    seed: u64,
) -> Result<Workload, TraceError> {
    generate(
        &SyntheticSpec { sessions: n_sessions, rate, turns: turn_dist, tokens: token_dist, think: ThinkDist::default() },
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceFormat {
    Jsonl,
    JsonlGz,
    /// Pick by extension: `.gz` means gzip.
    Auto,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    input: u32,
    output: u32,
}

#[derive(Deserialize)]
struct RawConversation {
    id: String,
    turns: Vec<RawTurn>,
}

/// Parses JSON-lines conversations. Blank lines are skipped.
pub fn parse_conversations<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<Turn>)>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConversation = serde_json::from_str(&line)
            .map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        if raw.turns.is_empty() {
            return Err(TraceError::ZeroTurns(raw.id));
        }
        let mut turns = Vec::with_capacity(raw.turns.len());
        for (k, t) in raw.turns.into_iter().enumerate() {
            if t.input == 0 {
                return Err(TraceError::ZeroInput { id: raw.id, turn: k });
            }
            turns.push(Turn { new_input_tokens: t.input, output_tokens: t.output });
        }
        out.push((raw.id, turns));
    }
    if out.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(out)
}

pub fn parse_trace_str(text: &str, model: &ArrivalModel) -> Result<Workload, TraceError> {
    assign_arrivals(parse_conversations(text.as_bytes())?, model)
}

pub fn load_trace_with(path: &Path, format: TraceFormat, model: &ArrivalModel) -> Result<Workload, TraceError> {
    let io = |source| TraceError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io)?;
    let gz = match format {
        TraceFormat::Jsonl => false,
        TraceFormat::JsonlGz => true,
        TraceFormat::Auto => path.extension().is_some_and(|e| e == "gz"),
    };
    let reader: Box<dyn Read> = if gz {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let convs = parse_conversations(BufReader::new(reader))?;
    assign_arrivals(convs, model)
}

pub fn load_trace(path: &Path, format: TraceFormat) -> Result<Workload, TraceError> {
    load_trace_with(path, format, &ArrivalModel::default())
}

/// Serializes sessions back to the JSON-lines trace schema.
pub fn to_jsonl(w: &Workload) -> String {
    let mut out = String::new();
    for s in &w.sessions {
        let turns: Vec<serde_json::Value> = s
            .turns
            .iter()
            .map(|t| serde_json::json!({"input": t.new_input_tokens, "output": t.output_tokens}))
            .collect();
        let line = serde_json::json!({"id": s.id, "turns": turns});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sessions: usize,
    pub turns: usize,
    pub mean_turns: f64,
    pub multi_turn_fraction: f64,
    pub over_2k_fraction: f64,
    pub over_4k_fraction: f64,
    pub mean_session_tokens: f64,
    /// Turn count → sessions.
    pub turn_histogram: BTreeMap<u32, usize>,
    /// Lower edge of a 1K-token bucket → sessions.
    pub token_histogram: BTreeMap<u64, usize>,
    /// Σ historical / Σ (historical + new) over all non-first turns.
    pub historical_token_share: f64,
    /// Mean of per-turn historical / new token ratios over non-first turns.
    pub mean_hist_to_new_ratio: f64,
}

pub fn trace_stats(w: &Workload) -> StatsReport {
    let n = w.sessions.len();
    let mut turn_histogram = BTreeMap::new();
    let mut token_histogram = BTreeMap::new();
    let (mut multi, mut over2, mut over4) = (0usize, 0usize, 0usize);
    let (mut hist_sum, mut prompt_sum, mut ratio_sum, mut ratio_n) = (0u64, 0u64, 0.0f64, 0usize);
    let mut total_tokens = 0u64;
    for s in &w.sessions {
        *turn_histogram.entry(s.turns.len() as u32).or_insert(0) += 1;
        let tot = s.total_tokens();
        total_tokens += tot;
        *token_histogram.entry(tot / 1024 * 1024).or_insert(0) += 1;
        multi += usize::from(s.turns.len() > 1);
        over2 += usize::from(tot > 2048);
        over4 += usize::from(tot > 4096);
        let mut hist = 0u64;
        for (k, t) in s.turns.iter().enumerate() {
            if k > 0 {
                let new = u64::from(t.new_input_tokens);
                hist_sum += hist;
                prompt_sum += hist + new;
                ratio_sum += hist as f64 / new as f64;
                ratio_n += 1;
            }
            hist += t.total();
        }
    }
    let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    let turns = w.total_turns();
    StatsReport {
        sessions: n,
        turns,
        mean_turns: frac(turns),
        multi_turn_fraction: frac(multi),
        over_2k_fraction: frac(over2),
        over_4k_fraction: frac(over4),
        mean_session_tokens: if n == 0 { 0.0 } else { total_tokens as f64 / n as f64 },
        turn_histogram,
        token_histogram,
        historical_token_share: if prompt_sum == 0 { 0.0 } else { hist_sum as f64 / prompt_sum as f64 },
        mean_hist_to_new_ratio: if ratio_n == 0 { 0.0 } else { ratio_sum / ratio_n as f64 },
    }
}

impl StatsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28}{:>12}", "sessions", self.sessions);
        let _ = writeln!(s, "{:<28}{:>12}", "turns", self.turns);
        let _ = writeln!(s, "{:<28}{:>12.3}", "mean turns/session", self.mean_turns);
        let _ = writeln!(s, "{:<28}{:>12.3}", "multi-turn fraction", self.multi_turn_fraction);
        let _ = writeln!(s, "{:<28}{:>12.3}", "sessions > 2K tokens", self.over_2k_fraction);
        let _ = writeln!(s, "{:<28}{:>12.3}", "sessions > 4K tokens", self.over_4k_fraction);
        let _ = writeln!(s, "{:<28}{:>12.1}", "mean session tokens", self.mean_session_tokens);
        let _ = writeln!(s, "{:<28}{:>12.3}", "historical token share", self.historical_token_share);
        let _ = writeln!(s, "{:<28}{:>12.2}", "mean hist/new ratio", self.mean_hist_to_new_ratio);
        let _ = writeln!(s, "\nturns  sessions");
        for (k, v) in &self.turn_histogram {
            let _ = writeln!(s, "{k:>5}  {v:>8}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_turn_trace() {
        let w = parse_trace_str(r#"{"id":"a","turns":[{"input":10,"output":5}]}"#, &ArrivalModel::default()).unwrap();
        assert_eq!(w.sessions.len(), 1);
        assert_eq!(w.merged_arrivals.len(), 1);
        assert_eq!(w.sessions[0].turns[0], Turn { new_input_tokens: 10, output_tokens: 5 });
        assert_eq!(trace_stats(&w).multi_turn_fraction, 0.0);
    }

    #[test]
    fn empty_and_malformed_inputs() {
        let m = ArrivalModel::default();
        assert!(matches!(parse_trace_str("", &m), Err(TraceError::EmptyTrace)));
        assert!(matches!(parse_trace_str("\n\n", &m), Err(TraceError::EmptyTrace)));
        match parse_trace_str("{\"id\":\"a\",\"turns\":[{\"input\":1,\"output\":1}]}\n{oops", &m) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_trace_str(r#"{"id":"z","turns":[]}"#, &m) {
            Err(TraceError::ZeroTurns(id)) => assert_eq!(id, "z"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_trace_str(r#"{"id":"z","turns":[{"input":0,"output":3}]}"#, &m),
            Err(TraceError::ZeroInput { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_poisson(300, 1.0, TurnDist::default(), TokenDist::default(), 7).unwrap();
        let b = generate_poisson(300, 1.0, TurnDist::default(), TokenDist::default(), 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_poisson(300, 1.0, TurnDist::default(), TokenDist::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_rate() {
        assert!(generate_poisson(10, 0.0, TurnDist::default(), TokenDist::default(), 1).is_err());
        assert!(generate_poisson(10, -1.0, TurnDist::default(), TokenDist::default(), 1).is_err());
        assert!(generate_poisson(0, 1.0, TurnDist::default(), TokenDist::default(), 1).is_err());
    }

    #[test]
    fn one_session() {
        let w = generate_poisson(1, 1.0, TurnDist::default(), TokenDist::default(), 3).unwrap();
        assert_eq!(w.sessions.len(), 1);
    }

    #[test]
    fn ties_break_by_id_then_turn() {
        let s = |id: &str, times: Vec<f64>| Session {
            id: id.into(),
            turns: vec![Turn { new_input_tokens: 1, output_tokens: 1 }; times.len()],
            arrival_times: times,
        };
        let w = Workload::from_sessions(vec![s("b", vec![1.0, 2.0]), s("a", vec![1.0, 2.0])]);
        let order: Vec<(usize, usize)> = w.merged_arrivals.iter().map(|a| (a.session, a.turn)).collect();
        assert_eq!(order, vec![(1, 0), (0, 0), (1, 1), (0, 1)]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let w = generate_poisson(20, 1.0, TurnDist::default(), TokenDist::default(), 1).unwrap();
        let text = to_jsonl(&w);
        let back = parse_conversations(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 20);
        for (s, (id, turns)) in w.sessions.iter().zip(back) {
            assert_eq!(s.id, id);
            assert_eq!(s.turns, turns);
        }
    }
}
