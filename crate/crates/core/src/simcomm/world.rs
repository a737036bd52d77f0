use std::any::{Any, TypeId};
use std::collections::HashMap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe, Location};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;

use serde::{Deserialize, Serialize};

use super::{Collective, CommError, CommLedger, LedgerEntry, ProcessGroup};
use crate::numerics::Scalar;

type Payload = Box<dyn Any + Send>;

/// Where a rank issued a collective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub rank: usize,
    pub collective: Collective,
    pub group: String,
    pub file: String,
    pub line: u32,
}

impl fmt::Display for CallSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rank {} {} on {} at {}:{}",
            self.rank, self.collective, self.group, self.file, self.line
        )
    }
}

struct Arrival {
    payload: Payload,
    step: u64,
    label: Option<String>,
}

struct Slot {
    kind: Collective,
    members: Vec<usize>,
    elem: TypeId,
    sites: Vec<Option<CallSite>>,
    arrivals: Vec<Option<Arrival>>,
    arrived: usize,
    outputs: Vec<Option<Payload>>,
    untaken: usize,
    done: bool,
}

#[derive(Default)]
struct State {
    slots: HashMap<(String, u64), Slot>,
    blocked: usize,
    finished: usize,
    failure: Option<(usize, CommError)>,
    ledger: Vec<LedgerEntry>,
}

impl State {
    fn fail(&mut self, origin: usize, err: CommError) -> CommError {
        if self.failure.is_none() {
            self.failure = Some((origin, err.clone()));
        }
        err
    }

    fn waiting_sites(&self) -> Vec<CallSite> {
        let mut sites: Vec<CallSite> = self
            .slots
            .values()
            .filter(|s| !s.done)
            .flat_map(|s| s.sites.iter().flatten().cloned())
            .collect();
        sites.sort_by_key(|s| s.rank);
        sites
    }

    /// Every live rank is parked in an incomplete collective.
    fn check_deadlock(&mut self, world_size: usize) -> Option<CommError> {
        if self.blocked > 0 && self.blocked + self.finished == world_size {
            let waiting = self.waiting_sites();
            let origin = waiting.first().map_or(0, |s| s.rank);
            let err = CommError::Deadlock {
                waiting,
                finished: self.finished,
            };
            return Some(self.fail(origin, err));
        }
        None
    }
}

struct Shared {
    world_size: usize,
    state: Mutex<State>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn finish(&self, rank: usize, failed: bool) {
        let mut st = self.lock();
        st.finished += 1;
        if failed {
            st.fail(rank, CommError::PeerFailed { rank });
        } else {
            st.check_deadlock(self.world_size);
        }
        drop(st);
        self.cv.notify_all();
    }
}

/// Result of a completed SPMD run.
#[derive(Debug, Clone)]
pub struct SpawnOutput<R> {
    /// Indexed by rank.
    pub results: Vec<R>,
    pub ledger: CommLedger,
}

/// Runs `program` once per rank on its own thread and waits for all of them.
///
/// Collectives rendezvous by `(group name, per-group sequence number)`, so
/// results and the ledger do not depend on thread scheduling. If any rank
/// fails, blocked peers are released and the error of the rank where the
/// failure originated is returned.
pub fn spawn<R, E, F>(world_size: usize, program: F) -> Result<SpawnOutput<R>, E>
where
    F: Fn(&mut Rank<'_>) -> Result<R, E> + Sync,
    R: Send,
    E: From<CommError> + Send,
{
    if world_size == 0 {
        return Err(CommError::EmptyWorld.into());
    }
    let shared = Shared {
        world_size,
        state: Mutex::new(State::default()),
        cv: Condvar::new(),
    };
    let outcomes: Vec<thread::Result<Result<R, E>>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..world_size)
            .map(|rank| {
                let shared = &shared;
                let program = &program;
                thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(scope, move || {
                        let mut ctx = Rank::new(rank, shared);
                        let out = panic::catch_unwind(AssertUnwindSafe(|| program(&mut ctx)));
                        let failed = !matches!(out, Ok(Ok(_)));
                        shared.finish(rank, failed);
                        out
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(Err))
            .collect()
    });

    let state = shared.state.into_inner().unwrap_or_else(|e| e.into_inner());
    let origin = state.failure.as_ref().map(|(r, _)| *r);
    let mut results = Vec::with_capacity(world_size);
    let mut first_err: Option<(usize, E)> = None;
    let mut panicked = None;
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(Ok(r)) => results.push(r),
            Ok(Err(e)) => {
                let better = match &first_err {
                    None => true,
                    Some((prev, _)) => origin == Some(rank) && origin != Some(*prev),
                };
                if better {
                    first_err = Some((rank, e));
                }
            }
            Err(p) => {
                if panicked.is_none() || origin == Some(rank) {
                    panicked = Some(p);
                }
            }
        }
    }
    if let Some(p) = panicked {
        panic::resume_unwind(p);
    }
    if let Some((_, e)) = first_err {
        return Err(e);
    }
    Ok(SpawnOutput {
        results,
        ledger: CommLedger::from_entries(state.ledger),
    })
}

/// A rank's handle to the simulated world.
pub struct Rank<'w> {
    rank: usize,
    shared: &'w Shared,
    step: u64,
    group_seq: HashMap<String, u64>,
    label: Option<String>,
}

impl<'w> Rank<'w> {
    fn new(rank: usize, shared: &'w Shared) -> Self {
        Self {
            rank,
            shared,
            step: 0,
            group_seq: HashMap::new(),
            label: None,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.world_size
    }

    pub fn world_group(&self) -> ProcessGroup {
        ProcessGroup::new("world", (0..self.world_size()).collect())
            .expect("world group is valid")
    }

    /// Tags the next collective's ledger entry.
    pub fn label_next(&mut self, label: impl Into<String>) -> &mut Self {
        self.label = Some(label.into());
        self
    }

    /// Elementwise sum, reduced in ascending rank order.
    #[track_caller]
    pub fn all_reduce<T: Scalar>(
        &mut self,
        group: &ProcessGroup,
        x: &[T],
    ) -> Result<Vec<T>, CommError> {
        let site = Location::caller();
        let out = self.exchange::<T>(
            group,
            Collective::AllReduce,
            Box::new(x.to_vec()),
            site,
            |inputs, members| {
                let xs = downcast_all::<Vec<T>>(inputs)?;
                let len = uniform_len(xs.iter().map(Vec::len), Collective::AllReduce)?;
                let order = ascending(members);
                let mut sum = vec![T::zero(); len];
                for &m in &order {
                    accumulate(&mut sum, &xs[m], m == order[0]);
                }
                let bytes = Collective::AllReduce.bytes_sent(payload_bytes::<T>(len), members.len());
                Ok((replicate(sum, members.len()), vec![bytes; members.len()]))
            },
        )?;
        take::<Vec<T>>(out)
    }

    /// Concatenation of every member's shard in group order.
    #[track_caller]
    pub fn all_gather<T: Scalar>(
        &mut self,
        group: &ProcessGroup,
        shard: &[T],
    ) -> Result<Vec<T>, CommError> {
        let site = Location::caller();
        let out = self.exchange::<T>(
            group,
            Collective::AllGather,
            Box::new(shard.to_vec()),
            site,
            |inputs, members| {
                let xs = downcast_all::<Vec<T>>(inputs)?;
                let len = uniform_len(xs.iter().map(Vec::len), Collective::AllGather)?;
                let n = members.len();
                let full: Vec<T> = xs.concat();
                let bytes = Collective::AllGather.bytes_sent(payload_bytes::<T>(len * n), n);
                Ok((replicate(full, n), vec![bytes; n]))
            },
        )?;
        take::<Vec<T>>(out)
    }

    /// Sum over ranks (ascending) of this member's `1/n` slice.
    #[track_caller]
    pub fn reduce_scatter<T: Scalar>(
        &mut self,
        group: &ProcessGroup,
        full: &[T],
    ) -> Result<Vec<T>, CommError> {
        let site = Location::caller();
        let out = self.exchange::<T>(
            group,
            Collective::ReduceScatter,
            Box::new(full.to_vec()),
            site,
            |inputs, members| {
                let xs = downcast_all::<Vec<T>>(inputs)?;
                let n = members.len();
                let len = uniform_len(xs.iter().map(Vec::len), Collective::ReduceScatter)?;
                if len % n != 0 {
                    return Err(CommError::SizeMismatch {
                        collective: Collective::ReduceScatter,
                        detail: format!("{len} elements do not split over {n} members"),
                    });
                }
                let chunk = len / n;
                let order = ascending(members);
                let shards = (0..n)
                    .map(|p| {
                        let mut sum = vec![T::zero(); chunk];
                        for &m in &order {
                            accumulate(&mut sum, &xs[m][p * chunk..(p + 1) * chunk], m == order[0]);
                        }
                        Box::new(sum) as Payload
                    })
                    .collect();
                let bytes = Collective::ReduceScatter.bytes_sent(payload_bytes::<T>(len), n);
                Ok((shards, vec![bytes; n]))
            },
        )?;
        take::<Vec<T>>(out)
    }

    /// `parts[j]` goes to member `j`; result `[i]` came from member `i`.
    /// All parts must have the same length.
    #[track_caller]
    pub fn all_to_all<T: Scalar>(
        &mut self,
        group: &ProcessGroup,
        parts: Vec<Vec<T>>,
    ) -> Result<Vec<Vec<T>>, CommError> {
        let site = Location::caller();
        let out = self.exchange::<T>(
            group,
            Collective::AllToAll,
            Box::new(parts),
            site,
            |inputs, members| {
                let n = members.len();
                let mut xs = downcast_all::<Vec<Vec<T>>>(inputs)?;
                if let Some(bad) = xs.iter().position(|p| p.len() != n) {
                    return Err(CommError::SizeMismatch {
                        collective: Collective::AllToAll,
                        detail: format!(
                            "member {} supplied {} parts for {n} peers",
                            members[bad],
                            xs[bad].len()
                        ),
                    });
                }
                let part = uniform_len(xs.iter().flatten().map(Vec::len), Collective::AllToAll)?;
                let mut recv: Vec<Vec<Vec<T>>> = (0..n).map(|_| Vec::with_capacity(n)).collect();
                for src in xs.iter_mut() {
                    for (dst, p) in src.drain(..).enumerate() {
                        recv[dst].push(p);
                    }
                }
                let bytes = Collective::AllToAll.bytes_sent(payload_bytes::<T>(part * n), n);
                Ok((
                    recv.into_iter().map(|r| Box::new(r) as Payload).collect(),
                    vec![bytes; n],
                ))
            },
        )?;
        take::<Vec<Vec<T>>>(out)
    }

    /// Sends `buf` to the next member and returns the previous member's buffer.
    #[track_caller]
    pub fn ring_shift<T: Scalar>(
        &mut self,
        group: &ProcessGroup,
        buf: Vec<T>,
    ) -> Result<Vec<T>, CommError> {
        let site = Location::caller();
        let out = self.exchange::<T>(
            group,
            Collective::RingShift,
            Box::new(buf),
            site,
            |inputs, members| {
                let n = members.len();
                let mut xs = downcast_all::<Vec<T>>(inputs)?;
                let len = uniform_len(xs.iter().map(Vec::len), Collective::RingShift)?;
                xs.rotate_right(1);
                let bytes = Collective::RingShift.bytes_sent(payload_bytes::<T>(len), n);
                Ok((
                    xs.into_iter().map(|x| Box::new(x) as Payload).collect(),
                    vec![bytes; n],
                ))
            },
        )?;
        take::<Vec<T>>(out)
    }

    /// `steps` consecutive single-hop shifts.
    #[track_caller]
    pub fn ring_shift_by<T: Scalar>(
        &mut self,
        group: &ProcessGroup,
        mut buf: Vec<T>,
        steps: usize,
    ) -> Result<Vec<T>, CommError> {
        for _ in 0..steps {
            buf = self.ring_shift(group, buf)?;
        }
        Ok(buf)
    }

    fn exchange<T: 'static>(
        &mut self,
        group: &ProcessGroup,
        kind: Collective,
        payload: Payload,
        location: &'static Location<'static>,
        op: impl FnOnce(Vec<Payload>, &[usize]) -> Result<(Vec<Payload>, Vec<f64>), CommError>,
    ) -> Result<Payload, CommError> {
        let pos = group.position(self.rank).ok_or_else(|| CommError::NotAMember {
            rank: self.rank,
            group: group.to_string(),
        })?;
        if let Some(&bad) = group.members().iter().find(|&&m| m >= self.world_size()) {
            return Err(CommError::InvalidGroup {
                group: group.name().to_string(),
                reason: format!("rank {bad} outside world of {}", self.world_size()),
            });
        }
        let seq_ref = self.group_seq.entry(group.name().to_string()).or_insert(0);
        let seq = *seq_ref;
        *seq_ref += 1;
        let step = self.step;
        self.step += 1;
        let label = self.label.take();
        let site = CallSite {
            rank: self.rank,
            collective: kind,
            group: group.name().to_string(),
            file: location.file().to_string(),
            line: location.line(),
        };
        let n = group.size();
        let key = (group.name().to_string(), seq);

        let shared = self.shared;
        let mut st = shared.lock();
        if let Some((_, err)) = &st.failure {
            return Err(err.clone());
        }
        let slot = st.slots.entry(key.clone()).or_insert_with(|| Slot {
            kind,
            members: group.members().to_vec(),
            elem: TypeId::of::<T>(),
            sites: vec![None; n],
            arrivals: (0..n).map(|_| None).collect(),
            arrived: 0,
            outputs: Vec::new(),
            untaken: 0,
            done: false,
        });
        if slot.kind != kind || slot.members != group.members() || slot.elem != TypeId::of::<T>()
        {
            let first = slot
                .sites
                .iter()
                .flatten()
                .next()
                .cloned()
                .expect("an existing slot has at least one caller");
            let err = CommError::Mismatch {
                first: Box::new(first),
                second: Box::new(site),
            };
            let err = st.fail(self.rank, err);
            drop(st);
            shared.cv.notify_all();
            return Err(err);
        }
        slot.sites[pos] = Some(site);
        slot.arrivals[pos] = Some(Arrival {
            payload,
            step,
            label,
        });
        slot.arrived += 1;

        if slot.arrived == n {
            let arrivals: Vec<Arrival> = slot.arrivals.drain(..).map(|a| a.expect("all arrived")).collect();
            let (inputs, meta): (Vec<Payload>, Vec<(u64, Option<String>)>) = arrivals
                .into_iter()
                .map(|a| (a.payload, (a.step, a.label)))
                .unzip();
            let members = slot.members.clone();
            match op(inputs, &members) {
                Ok((outputs, bytes)) => {
                    slot.outputs = outputs.into_iter().map(Some).collect();
                    slot.done = true;
                    let mine = slot.outputs[pos].take().expect("own output");
                    slot.untaken = n - 1;
                    if slot.untaken == 0 {
                        st.slots.remove(&key);
                    }
                    for ((&member, (member_step, member_label)), b) in
                        members.iter().zip(meta).zip(bytes)
                    {
                        st.ledger.push(LedgerEntry {
                            step: member_step,
                            collective: kind,
                            group: key.0.clone(),
                            group_seq: seq,
                            rank: member,
                            bytes: b,
                            label: member_label,
                        });
                    }
                    st.blocked -= n - 1;
                    drop(st);
                    shared.cv.notify_all();
                    Ok(mine)
                }
                Err(err) => {
                    let err = st.fail(self.rank, err);
                    drop(st);
                    shared.cv.notify_all();
                    Err(err)
                }
            }
        } else {
            st.blocked += 1;
            if let Some(err) = st.check_deadlock(shared.world_size) {
                drop(st);
                shared.cv.notify_all();
                return Err(err);
            }
            loop {
                st = shared.cv.wait(st).unwrap_or_else(|e| e.into_inner());
                if let Some(slot) = st.slots.get_mut(&key) {
                    if slot.done {
                        let mine = slot.outputs[pos].take().expect("output delivered once");
                        slot.untaken -= 1;
                        if slot.untaken == 0 {
                            st.slots.remove(&key);
                        }
                        return Ok(mine);
                    }
                }
                if let Some((_, err)) = &st.failure {
                    return Err(err.clone());
                }
            }
        }
    }
}

fn payload_bytes<T>(elements: usize) -> f64 {
    (elements * std::mem::size_of::<T>()) as f64
}

fn downcast_all<X: 'static>(inputs: Vec<Payload>) -> Result<Vec<X>, CommError> {
    inputs
        .into_iter()
        .map(|p| p.downcast::<X>().map(|b| *b).map_err(|_| CommError::TypeMismatch))
        .collect()
}

fn take<X: 'static>(p: Payload) -> Result<X, CommError> {
    p.downcast::<X>().map(|b| *b).map_err(|_| CommError::TypeMismatch)
}

fn uniform_len(
    mut lens: impl Iterator<Item = usize>,
    collective: Collective,
) -> Result<usize, CommError> {
    let first = lens.next().unwrap_or(0);
    for l in lens {
        if l != first {
            return Err(CommError::SizeMismatch {
                collective,
                detail: format!("payload sizes {first} and {l} disagree"),
            });
        }
    }
    Ok(first)
}

/// Group positions sorted by world rank.
fn ascending(members: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..members.len()).collect();
    idx.sort_by_key(|&i| members[i]);
    idx
}

fn accumulate<T: Scalar>(sum: &mut [T], x: &[T], first: bool) {
    if first {
        sum.copy_from_slice(x);
    } else {
        for (s, &v) in sum.iter_mut().zip(x) {
            *s = *s + v;
        }
    }
}

fn replicate<T: Scalar>(x: Vec<T>, n: usize) -> Vec<Payload> {
    (0..n).map(|_| Box::new(x.clone()) as Payload).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rank_world_is_identity() {
        let out = spawn(1, |r| -> Result<_, CommError> {
            let g = r.world_group();
            let a = r.all_reduce(&g, &[1.5f64, 2.0])?;
            let b = r.all_to_all(&g, vec![vec![3.0f64]])?;
            let c = r.ring_shift(&g, vec![4.0f64])?;
            Ok((a, b, c))
        })
        .unwrap();
        assert_eq!(out.results[0], (vec![1.5, 2.0], vec![vec![3.0]], vec![4.0]));
        assert_eq!(out.ledger.total_bytes(), 0.0);
    }

    #[test]
    fn all_reduce_scalar_over_four_ranks() {
        let out = spawn(4, |r| -> Result<_, CommError> {
            let g = r.world_group();
            r.all_reduce(&g, &[r.rank() as f64 + 0.25])
        })
        .unwrap();
        let expected = ((0.25f64 + 1.25) + 2.25) + 3.25;
        for res in &out.results {
            assert_eq!(res, &vec![expected]);
        }
        for e in out.ledger.entries() {
            assert_eq!(e.bytes, 12.0);
        }
        assert_eq!(out.ledger.events(Collective::AllReduce), 1);
    }

    #[test]
    fn all_to_all_transposes() {
        let out = spawn(2, |r| -> Result<_, CommError> {
            let g = r.world_group();
            let me = r.rank() as f64;
            r.all_to_all(&g, vec![vec![me * 10.0], vec![me * 10.0 + 1.0]])
        })
        .unwrap();
        assert_eq!(out.results[0], vec![vec![0.0], vec![10.0]]);
        assert_eq!(out.results[1], vec![vec![1.0], vec![11.0]]);
    }

    #[test]
    fn all_to_all_four_ranks_sixteen_byte_parts() {
        let out = spawn(4, |r| -> Result<_, CommError> {
            let g = r.world_group();
            r.all_to_all(&g, vec![vec![0.0f64; 2]; 4])
        })
        .unwrap();
        assert!(out.ledger.entries().iter().all(|e| e.bytes == 48.0));
    }

    #[test]
    fn ragged_all_to_all_is_rejected() {
        let err = spawn(2, |r| -> Result<_, CommError> {
            let g = r.world_group();
            let parts = if r.rank() == 0 {
                vec![vec![0.0f64], vec![0.0]]
            } else {
                vec![vec![0.0f64, 1.0], vec![0.0, 1.0]]
            };
            r.all_to_all(&g, parts)
        })
        .unwrap_err();
        assert!(matches!(err, CommError::SizeMismatch { .. }), "{err}");
    }

    #[test]
    fn mismatched_kinds_report_both_sites() {
        let err = spawn(2, |r| -> Result<_, CommError> {
            let g = r.world_group();
            if r.rank() == 0 {
                r.all_reduce(&g, &[1.0f64])
            } else {
                r.all_gather(&g, &[1.0f64])
            }
        })
        .unwrap_err();
        match err {
            CommError::Mismatch { first, second } => {
                assert_ne!(first.rank, second.rank);
                assert_ne!(first.collective, second.collective);
                assert_ne!(first.line, second.line);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rank_skipping_a_collective_is_a_deadlock() {
        let err = spawn(3, |r| -> Result<_, CommError> {
            let g = r.world_group();
            if r.rank() != 2 {
                r.all_reduce(&g, &[1.0f64])?;
            }
            Ok(())
        })
        .unwrap_err();
        match err {
            CommError::Deadlock { waiting, finished } => {
                assert_eq!(finished, 1);
                assert_eq!(waiting.len(), 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn disjoint_group_waits_are_a_deadlock() {
        let err = spawn(2, |r| -> Result<_, CommError> {
            let a = ProcessGroup::new("a", vec![0, 1])?;
            let b = ProcessGroup::new("b", vec![0, 1])?;
            let g = if r.rank() == 0 { a } else { b };
            r.all_reduce(&g, &[1.0f64])
        })
        .unwrap_err();
        assert!(matches!(err, CommError::Deadlock { .. }));
        assert!(err.to_string().contains("rank 0"));
        assert!(err.to_string().contains("rank 1"));
    }

    #[test]
    fn program_error_releases_peers() {
        #[derive(Debug)]
        enum E {
            Comm(#[allow(dead_code)] CommError),
            Boom,
        }
        impl From<CommError> for E {
            fn from(e: CommError) -> Self {
                E::Comm(e)
            }
        }
        let err = spawn(3, |r| -> Result<(), E> {
            if r.rank() == 1 {
                return Err(E::Boom);
            }
            let g = r.world_group();
            r.all_reduce(&g, &[1.0f64])?;
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, E::Boom), "{err:?}");
    }

    #[test]
    fn ring_shift_full_cycle_is_identity() {
        let out = spawn(5, |r| -> Result<_, CommError> {
            let g = r.world_group();
            let mine = vec![r.rank() as f64, -(r.rank() as f64)];
            let once = r.ring_shift(&g, mine.clone())?;
            let back = r.ring_shift_by(&g, once.clone(), 4)?;
            Ok((mine, once, back))
        })
        .unwrap();
        for (rank, (mine, once, back)) in out.results.iter().enumerate() {
            assert_eq!(once[0], ((rank + 4) % 5) as f64);
            assert_eq!(mine, back);
        }
        assert_eq!(out.ledger.calls_on_rank(Collective::RingShift, 0), 5);
    }

    #[test]
    fn reduce_scatter_of_ones() {
        let out = spawn(4, |r| -> Result<_, CommError> {
            let g = r.world_group();
            r.reduce_scatter(&g, &[1.0f64; 8])
        })
        .unwrap();
        for shard in out.results {
            assert_eq!(shard, vec![4.0, 4.0]);
        }
    }
}
