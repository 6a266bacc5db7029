//! Discrete-event pipeline simulator.
//!
//! Each mesh executes its instruction list in order, one instruction at a
//! time. A `send` is buffered: it posts a message that arrives after the
//! transfer time and never blocks the sender. A `recv` finishes at the later
//! of its issue time and the message's arrival. `sync` waits for every mesh.
//! All times are integer picoseconds, so the makespan is exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::DeviceId;
use crate::orchestrate::{Buffer, Instruction, Program};
use crate::time::Time;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("deadlock: mesh {mesh} waits at instruction {index} for tensor {tensor} microbatch {microbatch} from mesh {from}, which is never sent before it is needed")]
    Deadlock { mesh: usize, index: usize, tensor: usize, microbatch: u64, from: usize },
    #[error("unmatched send: mesh {from} sends tensor {tensor} microbatch {microbatch} to mesh {to}, which never receives it")]
    UnmatchedSend { from: usize, to: usize, tensor: usize, microbatch: u64 },
    #[error("out of memory on device {device} (mesh {mesh}) at instruction {index} ({label}): needs {required} bytes, has {available}")]
    OutOfMemory { mesh: usize, device: DeviceId, index: usize, label: String, required: u64, available: u64 },
    #[error("malformed program: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Treat every inter-stage transfer, including the receiving mesh's
    /// local all-gathers, as instantaneous.
    pub zero_transfer: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub mesh: usize,
    pub index: usize,
    pub label: String,
    pub start: Time,
    pub end: Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshStats {
    pub stage: usize,
    pub busy: Time,
    pub utilization: f64,
    pub peak_bytes: u64,
    /// Most activation buffers alive at once.
    pub peak_in_flight: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub makespan: Time,
    pub meshes: Vec<MeshStats>,
    pub device_peak_bytes: BTreeMap<DeviceId, u64>,
    pub trace: Vec<TraceEvent>,
}

/// One row per device: `[start_seconds, end_seconds, label]` triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gantt {
    pub rows: BTreeMap<String, Vec<(f64, f64, String)>>,
}

impl SimResult {
    pub fn gantt(&self, program: &Program) -> Gantt {
        let mut rows: BTreeMap<String, Vec<(f64, f64, String)>> = BTreeMap::new();
        for e in self.trace.iter().filter(|e| e.end > e.start) {
            for d in &program.meshes[e.mesh].devices {
                rows.entry(format!("device {d:04}")).or_default().push((e.start.as_secs_f64(), e.end.as_secs_f64(), e.label.clone()));
            }
        }
        Gantt { rows }
    }
}

type MsgKey = (usize, usize, usize, u64); // from, to, tensor, microbatch

struct MeshState {
    pc: usize,
    clock: Time,
    busy: Time,
    bytes: u64,
    peak: u64,
    live: BTreeMap<Buffer, u64>,
    in_flight: u64,
    peak_in_flight: u64,
}

pub fn simulate(program: &Program, opts: SimOptions) -> Result<SimResult, SimError> {
    let n = program.meshes.len();
    let mut st: Vec<MeshState> = (0..n)
        .map(|_| MeshState {
            pc: 0,
            clock: Time::ZERO,
            busy: Time::ZERO,
            bytes: 0,
            peak: 0,
            live: BTreeMap::new(),
            in_flight: 0,
            peak_in_flight: 0,
        })
        .collect();
    let mut inbox: BTreeMap<MsgKey, Time> = BTreeMap::new();
    let mut trace = Vec::new();
    loop {
        let mut progress = false;
        for m in 0..n {
            let list = &program.meshes[m].instructions;
            while let Some(ins) = list.get(st[m].pc) {
                let s = &mut st[m];
                let start = s.clock;
                let end = match ins {
                    Instruction::Alloc { buffer, bytes } => {
                        if s.live.insert(*buffer, *bytes).is_some() {
                            return Err(SimError::Malformed(format!("mesh {m} allocates {buffer:?} twice")));
                        }
                        s.bytes += bytes;
                        if s.bytes > program.device_memory {
                            return Err(SimError::OutOfMemory {
                                mesh: m,
                                device: program.meshes[m].devices.first().copied().unwrap_or(0),
                                index: s.pc,
                                label: ins.label(),
                                required: s.bytes,
                                available: program.device_memory,
                            });
                        }
                        s.peak = s.peak.max(s.bytes);
                        if matches!(buffer, Buffer::Activation(_)) {
                            s.in_flight += 1;
                            s.peak_in_flight = s.peak_in_flight.max(s.in_flight);
                        }
                        start
                    }
                    Instruction::Free { buffer } => {
                        let Some(b) = s.live.remove(buffer) else {
                            return Err(SimError::Malformed(format!("mesh {m} frees {buffer:?} without allocating it")));
                        };
                        s.bytes -= b;
                        if matches!(buffer, Buffer::Activation(_)) {
                            s.in_flight -= 1;
                        }
                        start
                    }
                    Instruction::Compute { duration, .. } => {
                        s.busy += *duration;
                        start + *duration
                    }
                    Instruction::AllGather { duration, .. } => {
                        let d = if opts.zero_transfer { Time::ZERO } else { *duration };
                        s.busy += d;
                        start + d
                    }
                    Instruction::Send { tensor, microbatch, to, transfer, .. } => {
                        let arrival = if opts.zero_transfer { start } else { start + *transfer };
                        if inbox.insert((m, *to, *tensor, *microbatch), arrival).is_some() {
                            return Err(SimError::Malformed(format!("mesh {m} sends tensor {tensor} microbatch {microbatch} twice")));
                        }
                        start
                    }
                    Instruction::Recv { tensor, microbatch, from } => match inbox.remove(&(*from, m, *tensor, *microbatch)) {
                        Some(arrival) => start.max(arrival),
                        None => break,
                    },
                    Instruction::Sync => {
                        let others_ready = (0..n).all(|o| {
                            let l = &program.meshes[o].instructions;
                            st[o].pc < l.len() && matches!(l[st[o].pc], Instruction::Sync)
                        });
                        if !others_ready {
                            break;
                        }
                        let t = st.iter().map(|x| x.clock).max().unwrap_or(Time::ZERO);
                        for (o, x) in st.iter_mut().enumerate() {
                            trace.push(TraceEvent { mesh: o, index: x.pc, label: "sync".into(), start: x.clock, end: t });
                            x.clock = t;
                            x.pc += 1;
                        }
                        progress = true;
                        break;
                    }
                };
                let s = &mut st[m];
                trace.push(TraceEvent { mesh: m, index: s.pc, label: ins.label(), start, end });
                s.clock = end;
                s.pc += 1;
                progress = true;
            }
        }
        if (0..n).all(|m| st[m].pc >= program.meshes[m].instructions.len()) {
            break;
        }
        if !progress {
            let (m, index, tensor, microbatch, from) = (0..n)
                .find_map(|m| match program.meshes[m].instructions.get(st[m].pc) {
                    Some(Instruction::Recv { tensor, microbatch, from }) => Some((m, st[m].pc, *tensor, *microbatch, *from)),
                    _ => None,
                })
                .ok_or_else(|| SimError::Malformed("meshes disagree on sync points".into()))?;
            return Err(SimError::Deadlock { mesh: m, index, tensor, microbatch, from });
        }
    }
    if let Some(&(from, to, tensor, microbatch)) = inbox.keys().next() {
        return Err(SimError::UnmatchedSend { from, to, tensor, microbatch });
    }
    let makespan = trace.iter().map(|e| e.end).max().unwrap_or(Time::ZERO);
    trace.sort_by_key(|e| (e.start, e.mesh, e.index));
    let meshes: Vec<MeshStats> = st
        .iter()
        .enumerate()
        .map(|(m, s)| MeshStats {
            stage: program.meshes[m].stage,
            busy: s.busy,
            utilization: if makespan == Time::ZERO { 0.0 } else { s.busy.ticks() as f64 / makespan.ticks() as f64 },
            peak_bytes: s.peak,
            peak_in_flight: s.peak_in_flight,
        })
        .collect();
    let mut device_peak_bytes = BTreeMap::new();
    for (m, mp) in program.meshes.iter().enumerate() {
        for &d in &mp.devices {
            device_peak_bytes.insert(d, meshes[m].peak_bytes);
        }
    }
    Ok(SimResult { makespan, meshes, device_peak_bytes, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrate::{emit_instructions, PipelineSkeleton, Schedule};

    fn secs(v: &[u64]) -> Vec<Time> {
        v.iter().map(|&s| Time::from_secs(s)).collect()
    }

    #[test]
    fn four_stage_grid_is_eighteen_seconds() {
        let sk = PipelineSkeleton::linear(&secs(&[2, 2, 4, 2]), 3);
        let r = simulate(&emit_instructions(&sk, Schedule::GPipe), SimOptions::default()).unwrap();
        assert_eq!(r.makespan, Time::from_secs(18));
    }

    #[test]
    fn single_stage_single_microbatch() {
        let sk = PipelineSkeleton::linear(&secs(&[5]), 1);
        let r = simulate(&emit_instructions(&sk, Schedule::OneFOneB), SimOptions::default()).unwrap();
        assert_eq!(r.makespan, Time::from_secs(5));
        assert_eq!(r.meshes[0].utilization, 1.0);
    }

    #[test]
    fn transfers_add_to_the_critical_path() {
        let mut sk = PipelineSkeleton::linear(&secs(&[1, 1]), 1);
        sk.stages[1].inputs[0].transfer = Time::from_secs(3);
        let prog = emit_instructions(&sk, Schedule::GPipe);
        assert_eq!(simulate(&prog, SimOptions::default()).unwrap().makespan, Time::from_secs(5));
        assert_eq!(simulate(&prog, SimOptions { zero_transfer: true }).unwrap().makespan, Time::from_secs(2));
    }

    #[test]
    fn missing_send_is_a_deadlock() {
        let sk = PipelineSkeleton::linear(&secs(&[1, 1]), 1);
        let mut prog = emit_instructions(&sk, Schedule::GPipe);
        prog.meshes[0].instructions.retain(|i| !matches!(i, Instruction::Send { .. }));
        assert!(matches!(simulate(&prog, SimOptions::default()), Err(SimError::Deadlock { mesh: 1, .. })));
    }

    #[test]
    fn oom_names_the_device() {
        let mut sk = PipelineSkeleton::linear(&secs(&[1]), 2);
        sk.stages[0].mem_act = 10;
        sk.device_memory = 5;
        let e = simulate(&emit_instructions(&sk, Schedule::GPipe), SimOptions::default()).unwrap_err();
        assert!(matches!(e, SimError::OutOfMemory { device: 0, required: 10, available: 5, .. }));
    }
}
