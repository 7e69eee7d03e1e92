//! A deterministic in-process map/shuffle/reduce executor.
//!
//! Mappers run on `partitions` worker threads over contiguous slices of the
//! input. The shuffle is a barrier: every emitted key is routed to exactly
//! one reducer worker, which visits its keys in ascending order. Before a
//! reducer sees the payloads of a key they are sorted by the record that
//! produced them (origin key, input position, emission sequence), so
//! floating-point reductions happen in the same order no matter how many
//! workers ran. Job output is sorted by key. The result is bit-identical
//! across partition counts.
//!
//! There is no spill to disk: inputs and shuffle data are held in memory.

use std::fmt;
use std::thread;

use serde::Serialize;
use thiserror::Error;

/// Environment variable overriding the default worker count.
pub const WORKERS_ENV: &str = "RSVD_WORKERS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub key: u64,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn new(key: u64, payload: Vec<u8>) -> Self {
        Self { key, payload }
    }
}

/// A record of a join job: the payloads of both sources for one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinedRecord {
    pub key: u64,
    pub left: Vec<u8>,
    pub right: Vec<u8>,
}

/// What a mapper sees for one input record.
#[derive(Debug, Clone, Copy)]
pub enum MapInput<'r> {
    Row { key: u64, payload: &'r [u8] },
    Joined { key: u64, left: &'r [u8], right: &'r [u8] },
}

impl MapInput<'_> {
    pub fn key(&self) -> u64 {
        match *self {
            MapInput::Row { key, .. } | MapInput::Joined { key, .. } => key,
        }
    }
}

/// Collects the records emitted by one mapper or reducer invocation.
#[derive(Debug, Default)]
pub struct Emitter {
    out: Vec<(u64, Vec<u8>)>,
}

impl Emitter {
    pub fn emit(&mut self, key: u64, payload: Vec<u8>) {
        self.out.push((key, payload));
    }
}

pub type MapFn<'a, E> = Box<dyn FnMut(MapInput<'_>, &mut Emitter) -> Result<(), E> + 'a>;
/// Called once per worker before it maps its first record. Whatever the
/// returned closure captures is that worker's initialized state.
pub type MapperFactory<'a, E> = Box<dyn Fn() -> Result<MapFn<'a, E>, E> + Send + Sync + 'a>;
pub type ReduceFn<'a, E> =
    Box<dyn Fn(u64, &[&[u8]], &mut Emitter) -> Result<(), E> + Send + Sync + 'a>;
pub type FinalReduceFn<'a, E> = Box<dyn FnOnce(Vec<Record>) -> Result<Vec<Record>, E> + Send + 'a>;

pub struct JobSpec<'a, E> {
    name: String,
    mapper: MapperFactory<'a, E>,
    reducer: Option<ReduceFn<'a, E>>,
    final_local_reduce: Option<FinalReduceFn<'a, E>>,
    partitions: usize,
    scans_source: bool,
}

impl<'a, E> JobSpec<'a, E> {
    /// A map-only job; without a reducer the mapper output is the job output.
    pub fn new(
        name: impl Into<String>,
        mapper: impl Fn() -> Result<MapFn<'a, E>, E> + Send + Sync + 'a,
    ) -> Self {
        Self {
            name: name.into(),
            mapper: Box::new(mapper),
            reducer: None,
            final_local_reduce: None,
            partitions: 1,
            scans_source: false,
        }
    }

    /// Convenience for mappers that need no per-worker initialization.
    pub fn stateless(
        name: impl Into<String>,
        mapper: impl Fn(MapInput<'_>, &mut Emitter) -> Result<(), E> + Send + Sync + Copy + 'a,
    ) -> Self
    where
        E: 'a,
    {
        Self::new(name, move || Ok(Box::new(mapper) as MapFn<'a, E>))
    }

    pub fn reducer(
        mut self,
        reducer: impl Fn(u64, &[&[u8]], &mut Emitter) -> Result<(), E> + Send + Sync + 'a,
    ) -> Self {
        self.reducer = Some(Box::new(reducer));
        self
    }

    pub fn final_local_reduce(
        mut self,
        f: impl FnOnce(Vec<Record>) -> Result<Vec<Record>, E> + Send + 'a,
    ) -> Self {
        self.final_local_reduce = Some(Box::new(f));
        self
    }

    pub fn partitions(mut self, partitions: usize) -> Self {
        self.partitions = partitions;
        self
    }

    /// Marks the job as a full pass over the source matrix `A`.
    pub fn scans_source(mut self) -> Self {
        self.scans_source = true;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

pub enum JobInput {
    Records(Vec<Record>),
    /// Inner join of two keyed sources; each key may appear once per side.
    Join { left: Vec<Record>, right: Vec<Record> },
}

/// Exact counters for one job or, accumulated, for a whole pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JobStats {
    pub input_records: u64,
    pub map_emits: u64,
    pub shuffle_bytes: u64,
    #[serde(rename = "passes_over_A")]
    pub passes_over_a: u64,
    pub dropped_join_keys: u64,
}

impl JobStats {
    pub fn absorb(&mut self, other: &JobStats) {
        self.input_records += other.input_records;
        self.map_emits += other.map_emits;
        self.shuffle_bytes += other.shuffle_bytes;
        self.passes_over_a += other.passes_over_a;
        self.dropped_join_keys += other.dropped_join_keys;
    }
}

#[derive(Debug)]
pub struct JobOutput {
    pub records: Vec<Record>,
    pub stats: JobStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    MapInit,
    Map,
    Reduce,
    FinalLocalReduce,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::MapInit => "mapper initialization",
            Phase::Map => "map",
            Phase::Reduce => "reduce",
            Phase::FinalLocalReduce => "final local reduce",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinSide {
    Left,
    Right,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("duplicate join key {key} in {side:?} input")]
pub struct DuplicateJoinKey {
    pub key: u64,
    pub side: JoinSide,
}

#[derive(Debug, Error)]
pub enum EngineError<E> {
    #[error("job {job}: {phase} failed at key {key}: {source}")]
    Task {
        job: String,
        phase: Phase,
        key: u64,
        #[source]
        source: E,
    },
    #[error(transparent)]
    DuplicateJoinKey(#[from] DuplicateJoinKey),
    #[error("job {0}: partition count must be at least 1")]
    NoPartitions(String),
}

/// Worker count from `RSVD_WORKERS`, falling back to the number of cores.
pub fn default_partitions() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Default)]
pub struct JoinOutput {
    pub rows: Vec<JoinedRecord>,
    pub dropped_keys: u64,
}

/// Inner join on key. Keys present on only one side are dropped and counted.
pub fn join_rows(left: Vec<Record>, right: Vec<Record>) -> Result<JoinOutput, DuplicateJoinKey> {
    let left = sorted_unique(left, JoinSide::Left)?;
    let right = sorted_unique(right, JoinSide::Right)?;
    let mut out = JoinOutput::default();
    let mut rights = right.into_iter().peekable();
    for l in left {
        while rights.peek().is_some_and(|r| r.key < l.key) {
            rights.next();
            out.dropped_keys += 1;
        }
        match rights.peek() {
            Some(r) if r.key == l.key => {
                let r = rights.next().unwrap();
                out.rows.push(JoinedRecord {
                    key: l.key,
                    left: l.payload,
                    right: r.payload,
                });
            }
            _ => out.dropped_keys += 1,
        }
    }
    out.dropped_keys += rights.count() as u64;
    if out.dropped_keys > 0 {
        log::warn!("join dropped {} keys present on one side only", out.dropped_keys);
    }
    Ok(out)
}

fn sorted_unique(mut records: Vec<Record>, side: JoinSide) -> Result<Vec<Record>, DuplicateJoinKey> {
    records.sort_by_key(|r| r.key);
    if let Some(w) = records.windows(2).find(|w| w[0].key == w[1].key) {
        return Err(DuplicateJoinKey { key: w[0].key, side });
    }
    Ok(records)
}

/// One map emission tagged with where it came from.
struct Emission {
    key: u64,
    origin_key: u64,
    position: usize,
    seq: usize,
    payload: Vec<u8>,
}

impl Emission {
    fn order(&self) -> (u64, u64, usize, usize) {
        (self.key, self.origin_key, self.position, self.seq)
    }
}

enum Item {
    Row(Record),
    Joined(JoinedRecord),
}

impl Item {
    fn as_input(&self) -> MapInput<'_> {
        match self {
            Item::Row(r) => MapInput::Row {
                key: r.key,
                payload: &r.payload,
            },
            Item::Joined(j) => MapInput::Joined {
                key: j.key,
                left: &j.left,
                right: &j.right,
            },
        }
    }
}

type TaskFailure<E> = (usize, Phase, u64, E);

pub fn run_job<E: Send>(spec: JobSpec<'_, E>, input: JobInput) -> Result<JobOutput, EngineError<E>> {
    let JobSpec {
        name,
        mapper,
        reducer,
        final_local_reduce,
        partitions,
        scans_source,
    } = spec;
    if partitions == 0 {
        return Err(EngineError::NoPartitions(name));
    }
    let task_error = |(_, phase, key, source): TaskFailure<E>| EngineError::Task {
        job: name.clone(),
        phase,
        key,
        source,
    };

    let mut stats = JobStats {
        passes_over_a: u64::from(scans_source),
        ..JobStats::default()
    };
    let items: Vec<Item> = match input {
        JobInput::Records(records) => {
            stats.input_records = records.len() as u64;
            records.into_iter().map(Item::Row).collect()
        }
        JobInput::Join { left, right } => {
            stats.input_records = (left.len() + right.len()) as u64;
            let joined = join_rows(left, right)?;
            stats.dropped_join_keys = joined.dropped_keys;
            joined.rows.into_iter().map(Item::Joined).collect()
        }
    };

    let mut emissions = map_phase(&items, &mapper, partitions).map_err(task_error)?;
    drop(items);
    stats.map_emits = emissions.len() as u64;

    let mut records = match &reducer {
        Some(reduce) => {
            stats.shuffle_bytes = emissions.iter().map(|e| e.payload.len() as u64).sum();
            reduce_phase(emissions, reduce, partitions).map_err(task_error)?
        }
        None => {
            emissions.sort_unstable_by_key(Emission::order);
            emissions
                .into_iter()
                .map(|e| Record::new(e.key, e.payload))
                .collect()
        }
    };

    if let Some(finish) = final_local_reduce {
        records = finish(records).map_err(|source| EngineError::Task {
            job: name.clone(),
            phase: Phase::FinalLocalReduce,
            key: 0,
            source,
        })?;
    }
    Ok(JobOutput { records, stats })
}

fn map_phase<E: Send>(
    items: &[Item],
    mapper: &MapperFactory<'_, E>,
    partitions: usize,
) -> Result<Vec<Emission>, TaskFailure<E>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = items.len().div_ceil(partitions);
    let results: Vec<Result<Vec<Emission>, TaskFailure<E>>> = thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(w, slice)| {
                let offset = w * chunk;
                scope.spawn(move || map_worker(slice, offset, mapper))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("map worker panicked"))
            .collect()
    });
    collect_first_error(results).map(|parts| parts.into_iter().flatten().collect())
}

fn map_worker<E>(
    slice: &[Item],
    offset: usize,
    mapper: &MapperFactory<'_, E>,
) -> Result<Vec<Emission>, TaskFailure<E>> {
    let first_key = slice[0].as_input().key();
    let mut map = mapper().map_err(|e| (offset, Phase::MapInit, first_key, e))?;
    let mut out = Vec::new();
    let mut emitter = Emitter::default();
    for (i, item) in slice.iter().enumerate() {
        let input = item.as_input();
        let position = offset + i;
        map(input, &mut emitter).map_err(|e| (position, Phase::Map, input.key(), e))?;
        out.extend(emitter.out.drain(..).enumerate().map(|(seq, (key, payload))| Emission {
            key,
            origin_key: input.key(),
            position,
            seq,
            payload,
        }));
    }
    Ok(out)
}

fn reduce_phase<E: Send>(
    emissions: Vec<Emission>,
    reduce: &ReduceFn<'_, E>,
    partitions: usize,
) -> Result<Vec<Record>, TaskFailure<E>> {
    let mut buckets: Vec<Vec<Emission>> = (0..partitions).map(|_| Vec::new()).collect();
    for e in emissions {
        buckets[(e.key % partitions as u64) as usize].push(e);
    }
    let results: Vec<Result<Vec<(u64, u64, usize, Vec<u8>)>, TaskFailure<E>>> =
        thread::scope(|scope| {
            let handles: Vec<_> = buckets
                .into_iter()
                .map(|bucket| scope.spawn(move || reduce_worker(bucket, reduce)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("reduce worker panicked"))
                .collect()
        });
    let mut tagged: Vec<_> = collect_first_error(results)?.into_iter().flatten().collect();
    // (output key, reduce key, emission sequence)
    tagged.sort_unstable_by_key(|t| (t.0, t.1, t.2));
    Ok(tagged
        .into_iter()
        .map(|(key, _, _, payload)| Record::new(key, payload))
        .collect())
}

fn reduce_worker<E>(
    mut bucket: Vec<Emission>,
    reduce: &ReduceFn<'_, E>,
) -> Result<Vec<(u64, u64, usize, Vec<u8>)>, TaskFailure<E>> {
    bucket.sort_unstable_by_key(Emission::order);
    let mut out = Vec::new();
    let mut emitter = Emitter::default();
    for group in bucket.chunk_by(|a, b| a.key == b.key) {
        let key = group[0].key;
        let payloads: Vec<&[u8]> = group.iter().map(|e| e.payload.as_slice()).collect();
        // the key doubles as the ordering position for error selection
        reduce(key, &payloads, &mut emitter).map_err(|e| (key as usize, Phase::Reduce, key, e))?;
        out.extend(
            emitter
                .out
                .drain(..)
                .enumerate()
                .map(|(seq, (out_key, payload))| (out_key, key, seq, payload)),
        );
    }
    Ok(out)
}

/// Keeps the failure with the smallest position so the reported error does
/// not depend on thread scheduling.
fn collect_first_error<T, E>(results: Vec<Result<T, TaskFailure<E>>>) -> Result<Vec<T>, TaskFailure<E>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut first: Option<TaskFailure<E>> = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(f) => {
                if first.as_ref().is_none_or(|cur| f.0 < cur.0) {
                    first = Some(f);
                }
            }
        }
    }
    match first {
        Some(f) => Err(f),
        None => Ok(ok),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn rec(key: u64, payload: &[u8]) -> Record {
        Record::new(key, payload.to_vec())
    }

    fn identity(input: MapInput<'_>, out: &mut Emitter) -> Result<(), Infallible> {
        if let MapInput::Row { key, payload } = input {
            out.emit(key, payload.to_vec());
        }
        Ok(())
    }

    fn parity_count_job(partitions: usize) -> JobOutput {
        let spec = JobSpec::stateless("parity", |input: MapInput<'_>, out: &mut Emitter| {
            out.emit(input.key() % 2, 1u64.to_le_bytes().to_vec());
            Ok::<_, Infallible>(())
        })
        .reducer(|key, values, out| {
            let total: u64 = values
                .iter()
                .map(|v| u64::from_le_bytes((*v).try_into().unwrap()))
                .sum();
            out.emit(key, total.to_le_bytes().to_vec());
            Ok(())
        })
        .partitions(partitions);
        let input = (0..10).map(|k| rec(k, b"")).collect();
        run_job(spec, JobInput::Records(input)).unwrap()
    }

    #[test]
    fn passthrough_without_reducer() {
        let spec = JobSpec::stateless("identity", identity).partitions(3);
        let out = run_job(spec, JobInput::Records(vec![rec(1, b"b"), rec(0, b"a")])).unwrap();
        assert_eq!(out.records, vec![rec(0, b"a"), rec(1, b"b")]);
        assert_eq!(out.stats.map_emits, 2);
        assert_eq!(out.stats.shuffle_bytes, 0);
    }

    #[test]
    fn reducer_sums_parity_groups() {
        let out = parity_count_job(1);
        let decoded: Vec<(u64, u64)> = out
            .records
            .iter()
            .map(|r| (r.key, u64::from_le_bytes(r.payload[..].try_into().unwrap())))
            .collect();
        assert_eq!(decoded, vec![(0, 5), (1, 5)]);
        assert_eq!(out.stats.shuffle_bytes, 80);
        for p in [2, 3, 8, 16] {
            assert_eq!(parity_count_job(p).records, out.records);
        }
    }

    #[test]
    fn reducer_payloads_arrive_in_origin_order() {
        for partitions in [1, 2, 4, 8] {
            let spec = JobSpec::stateless("order", |input: MapInput<'_>, out: &mut Emitter| {
                let k = input.key();
                out.emit(0, vec![k as u8, 0]);
                out.emit(0, vec![k as u8, 1]);
                Ok::<_, Infallible>(())
            })
            .reducer(|key, values, out| {
                out.emit(key, values.concat());
                Ok(())
            })
            .partitions(partitions);
            let input = [5u64, 2, 9, 0].iter().map(|&k| rec(k, b"")).collect();
            let out = run_job(spec, JobInput::Records(input)).unwrap();
            assert_eq!(out.records[0].payload, vec![0, 0, 0, 1, 2, 0, 2, 1, 5, 0, 5, 1, 9, 0, 9, 1]);
        }
    }

    #[test]
    fn every_emission_reaches_exactly_one_reducer() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let delivered = AtomicU64::new(0);
        let calls = AtomicU64::new(0);
        let spec = JobSpec::stateless("fanout", |input: MapInput<'_>, out: &mut Emitter| {
            for j in 0..(input.key() % 5) {
                out.emit(j * 7 % 11, vec![1]);
            }
            Ok::<_, Infallible>(())
        })
        .reducer(|_, values, _| {
            delivered.fetch_add(values.len() as u64, Ordering::Relaxed);
            calls.fetch_add(1, Ordering::Relaxed);
            Ok(())
        })
        .partitions(4);
        let out = run_job(spec, JobInput::Records((0..100).map(|k| rec(k, b"")).collect())).unwrap();
        assert_eq!(delivered.load(Ordering::Relaxed), out.stats.map_emits);
        assert_eq!(calls.load(Ordering::Relaxed), 4);
    }

    #[test]
    fn mapper_initialized_once_per_worker() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let inits = AtomicUsize::new(0);
        let spec = JobSpec::new("init", || {
            inits.fetch_add(1, Ordering::SeqCst);
            Ok::<MapFn<'_, Infallible>, Infallible>(Box::new(identity))
        })
        .partitions(4);
        run_job(spec, JobInput::Records((0..20).map(|k| rec(k, b"")).collect())).unwrap();
        assert_eq!(inits.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn final_local_reduce_sees_sorted_reducer_output() {
        let spec = JobSpec::stateless("final", |input: MapInput<'_>, out: &mut Emitter| {
            out.emit(100 - input.key(), vec![]);
            Ok::<_, Infallible>(())
        })
        .reducer(|key, _, out| {
            out.emit(key, vec![]);
            Ok(())
        })
        .final_local_reduce(|records| {
            let keys: Vec<u64> = records.iter().map(|r| r.key).collect();
            Ok(vec![Record::new(0, keys.iter().map(|k| *k as u8).collect())])
        })
        .partitions(3);
        let out = run_job(spec, JobInput::Records((0..5).map(|k| rec(k, b"")).collect())).unwrap();
        assert_eq!(out.records, vec![rec(0, &[96, 97, 98, 99, 100])]);
    }

    #[test]
    fn first_mapper_error_is_reported_deterministically() {
        for partitions in [1, 2, 5] {
            let spec = JobSpec::stateless("fail", |input: MapInput<'_>, _: &mut Emitter| {
                if input.key() >= 3 {
                    Err(format!("bad {}", input.key()))
                } else {
                    Ok(())
                }
            })
            .partitions(partitions);
            let err = run_job(spec, JobInput::Records((0..10).map(|k| rec(k, b"")).collect()))
                .unwrap_err();
            match err {
                EngineError::Task { phase, key, source, .. } => {
                    assert_eq!((phase, key, source.as_str()), (Phase::Map, 3, "bad 3"));
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn zero_partitions_rejected() {
        let spec = JobSpec::stateless("none", identity).partitions(0);
        assert!(matches!(
            run_job(spec, JobInput::Records(vec![])),
            Err(EngineError::NoPartitions(_))
        ));
    }

    #[test]
    fn join_examples() {
        let out = join_rows(vec![rec(0, b"x")], vec![rec(0, b"y")]).unwrap();
        assert_eq!(
            out.rows,
            vec![JoinedRecord {
                key: 0,
                left: b"x".to_vec(),
                right: b"y".to_vec()
            }]
        );
        assert_eq!(out.dropped_keys, 0);

        let out = join_rows(vec![rec(0, b"x"), rec(1, b"z")], vec![rec(0, b"y")]).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.dropped_keys, 1);

        let out = join_rows(vec![rec(3, b"x")], vec![rec(1, b"y"), rec(5, b"z")]).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.dropped_keys, 3);

        assert_eq!(
            join_rows(vec![rec(0, b"x"), rec(0, b"x'")], vec![]).unwrap_err(),
            DuplicateJoinKey {
                key: 0,
                side: JoinSide::Left
            }
        );
    }

    #[test]
    fn join_job_counts_and_maps_pairs() {
        let spec = JobSpec::stateless("join", |input: MapInput<'_>, out: &mut Emitter| {
            if let MapInput::Joined { key, left, right } = input {
                out.emit(key, [left, right].concat());
            }
            Ok::<_, Infallible>(())
        })
        .partitions(2);
        let out = run_job(
            spec,
            JobInput::Join {
                left: vec![rec(0, b"a"), rec(1, b"b")],
                right: vec![rec(1, b"c"), rec(2, b"d")],
            },
        )
        .unwrap();
        assert_eq!(out.records, vec![rec(1, b"bc")]);
        assert_eq!(out.stats.input_records, 4);
        assert_eq!(out.stats.dropped_join_keys, 2);

        let spec = JobSpec::stateless("dup", identity);
        assert!(matches!(
            run_job(
                spec,
                JobInput::Join {
                    left: vec![],
                    right: vec![rec(4, b""), rec(4, b"")]
                }
            ),
            Err(EngineError::DuplicateJoinKey(DuplicateJoinKey { key: 4, side: JoinSide::Right }))
        ));
    }

    #[test]
    fn source_scans_are_counted() {
        let spec = JobSpec::stateless("scan", identity).scans_source();
        let out = run_job(spec, JobInput::Records(vec![rec(0, b"")])).unwrap();
        assert_eq!(out.stats.passes_over_a, 1);
        let mut total = JobStats::default();
        total.absorb(&out.stats);
        total.absorb(&out.stats);
        assert_eq!(total.passes_over_a, 2);
        assert_eq!(total.input_records, 2);
    }
}
