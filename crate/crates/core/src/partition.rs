//! Slab domain decomposition and the message-passing layer underneath the
//! parallel PDE solve.
//!
//! The bounding-box sub-lattice is cut into slabs of whole planes along its
//! longest axis; each worker owns one slab plus one-plane ghost copies of
//! its neighbours' boundary planes. All collective operations (scatter,
//! gather, halo exchange, global sums) are bulk-synchronous: every active
//! worker calls them in the same order.
//!
//! Wire payloads are little-endian f64 arrays prefixed by a 16-byte header
//! `(species id: u32, plane index: u32, count: u64)`. Two transports carry
//! them: in-process channels between worker threads ([`ChannelTransport`])
//! and TCP sockets between worker processes ([`socket`]).

use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

use crate::krylov::SolverComm;

pub mod socket;

/// Default deadline for any single blocking receive.
pub const DEFAULT_COMM_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum CommError {
    #[error("timed out after {0:?} waiting for rank {1}")]
    Timeout(Duration, usize),
    #[error("rank {0} disconnected")]
    Disconnected(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("{p} workers requested for {extent} planes")]
    MoreWorkersThanPlanes { p: usize, extent: usize },
}

/// Message-kind tags carried in the header's species field. Values below
/// 100 are reserved for species ids.
pub mod tag {
    pub const SUM_PART: u32 = 110;
    pub const SUM_TOTAL: u32 = 111;
    pub const SCATTER: u32 = 120;
    pub const GATHER: u32 = 121;
    pub const MASK: u32 = 122;
    pub const TIME: u32 = 123;
    pub const HALO_BASE: u32 = 200;

    pub fn halo(species: u32) -> u32 {
        HALO_BASE + species
    }
}

/// 16-byte wire header: species id, plane index, payload count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsgHeader {
    pub species: u32,
    pub plane: u32,
    pub count: u64,
}

impl MsgHeader {
    pub fn to_bytes(self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..4].copy_from_slice(&self.species.to_le_bytes());
        b[4..8].copy_from_slice(&self.plane.to_le_bytes());
        b[8..16].copy_from_slice(&self.count.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; 16]) -> Self {
        Self {
            species: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            plane: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            count: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: MsgHeader,
    pub payload: Vec<f64>,
}

impl Message {
    pub fn new(species: u32, plane: u32, payload: Vec<f64>) -> Self {
        Self {
            header: MsgHeader {
                species,
                plane,
                count: payload.len() as u64,
            },
            payload,
        }
    }
}

/// Point-to-point message passing between workers. Implementations must be
/// usable from exactly one thread per rank.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, to: usize, msg: Message) -> Result<(), CommError>;
    fn recv(&mut self, from: usize) -> Result<Message, CommError>;
}

/// In-process transport: one mpsc channel per ordered rank pair.
pub struct ChannelTransport {
    rank: usize,
    size: usize,
    timeout: Duration,
    senders: Vec<Option<Sender<Message>>>,
    receivers: Vec<Option<Receiver<Message>>>,
}

/// Builds the full mesh of channels for `p` ranks.
pub fn channel_mesh(p: usize, timeout: Duration) -> Vec<ChannelTransport> {
    let mut transports: Vec<ChannelTransport> = (0..p)
        .map(|rank| ChannelTransport {
            rank,
            size: p,
            timeout,
            senders: (0..p).map(|_| None).collect(),
            receivers: (0..p).map(|_| None).collect(),
        })
        .collect();
    for from in 0..p {
        for to in 0..p {
            if from == to {
                continue;
            }
            let (tx, rx) = std::sync::mpsc::channel();
            transports[from].senders[to] = Some(tx);
            transports[to].receivers[from] = Some(rx);
        }
    }
    transports
}

impl Transport for ChannelTransport {
    fn rank(&self) -> usize {
        self.rank
    }
    fn size(&self) -> usize {
        self.size
    }
    fn send(&mut self, to: usize, msg: Message) -> Result<(), CommError> {
        self.senders[to]
            .as_ref()
            .expect("no channel to rank")
            .send(msg)
            .map_err(|_| CommError::Disconnected(to))
    }
    fn recv(&mut self, from: usize) -> Result<Message, CommError> {
        match self.receivers[from]
            .as_ref()
            .expect("no channel from rank")
            .recv_timeout(self.timeout)
        {
            Ok(m) => Ok(m),
            Err(RecvTimeoutError::Timeout) => Err(CommError::Timeout(self.timeout, from)),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::Disconnected(from)),
        }
    }
}

/// Index of the longest axis; ties resolve to the later axis so cubic
/// boxes split along z, where planes are contiguous in memory.
pub fn longest_axis(dims: [usize; 3]) -> usize {
    let mut axis = 0;
    for a in 1..3 {
        if dims[a] >= dims[axis] {
            axis = a;
        }
    }
    axis
}

/// Balanced slab split: per-worker plane offsets and counts along `axis`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlabPartition {
    pub axis: usize,
    pub starts: Vec<usize>,
    pub counts: Vec<usize>,
}

impl SlabPartition {
    pub fn workers(&self) -> usize {
        self.counts.len()
    }

    pub fn slab(&self, box_dims: [usize; 3], rank: usize) -> LocalSlab {
        LocalSlab {
            box_dims,
            axis: self.axis,
            start: self.starts[rank],
            count: self.counts[rank],
        }
    }
}

/// `extent / p` planes each, plus one extra for the first `extent % p`
/// workers.
pub fn partition_slabs(extent: usize, p: usize) -> Result<SlabPartition, PartitionError> {
    assert!(extent >= 1 && p >= 1);
    if p > extent {
        return Err(PartitionError::MoreWorkersThanPlanes { p, extent });
    }
    let base = extent / p;
    let rem = extent % p;
    let mut starts = Vec::with_capacity(p);
    let mut counts = Vec::with_capacity(p);
    let mut at = 0;
    for r in 0..p {
        let count = base + usize::from(r < rem);
        starts.push(at);
        counts.push(count);
        at += count;
    }
    debug_assert_eq!(at, extent);
    Ok(SlabPartition {
        axis: 2,
        starts,
        counts,
    })
}

/// Splits a box along its longest axis.
pub fn partition_box(box_dims: [usize; 3], p: usize) -> Result<SlabPartition, PartitionError> {
    let axis = longest_axis(box_dims);
    let mut part = partition_slabs(box_dims[axis], p)?;
    part.axis = axis;
    Ok(part)
}

/// One worker's view of its slab: owned planes `[start, start+count)` of
/// the box along `axis`, plus ghost planes on interior faces.
///
/// Extended vectors are laid out `[owned voxels (x-fastest over the slab),
/// lower ghost plane, upper ghost plane]`, ghost blocks present only where
/// a neighbouring slab exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalSlab {
    pub box_dims: [usize; 3],
    pub axis: usize,
    pub start: usize,
    pub count: usize,
}

impl LocalSlab {
    pub fn whole(box_dims: [usize; 3]) -> Self {
        let axis = longest_axis(box_dims);
        Self {
            box_dims,
            axis,
            start: 0,
            count: box_dims[axis],
        }
    }

    pub fn extent(&self) -> usize {
        self.box_dims[self.axis]
    }

    pub fn local_dims(&self) -> [usize; 3] {
        let mut d = self.box_dims;
        d[self.axis] = self.count;
        d
    }

    pub fn n_local(&self) -> usize {
        let d = self.local_dims();
        d[0] * d[1] * d[2]
    }

    /// Voxels in one plane perpendicular to the split axis.
    pub fn cross_section(&self) -> usize {
        let d = self.box_dims;
        match self.axis {
            0 => d[1] * d[2],
            1 => d[0] * d[2],
            _ => d[0] * d[1],
        }
    }

    pub fn has_lower(&self) -> bool {
        self.start > 0
    }

    pub fn has_upper(&self) -> bool {
        self.start + self.count < self.extent()
    }

    pub fn lower_ghost_offset(&self) -> usize {
        self.n_local()
    }

    pub fn upper_ghost_offset(&self) -> usize {
        self.n_local()
            + if self.has_lower() {
                self.cross_section()
            } else {
                0
            }
    }

    /// Extended vector length: owned + ghost planes.
    pub fn n_cols(&self) -> usize {
        let ghosts = usize::from(self.has_lower()) + usize::from(self.has_upper());
        self.n_local() + ghosts * self.cross_section()
    }

    /// Index of an owned voxel given slab-local coordinates (the axis
    /// coordinate is plane-relative).
    #[inline]
    pub fn local_index(&self, local: [usize; 3]) -> usize {
        let d = self.local_dims();
        debug_assert!(local[0] < d[0] && local[1] < d[1] && local[2] < d[2]);
        local[0] + d[0] * (local[1] + d[1] * local[2])
    }

    /// Cross-section index of a voxel: its coordinates with the split axis
    /// removed, x-fastest over the remaining two.
    #[inline]
    pub fn cs_index(&self, coords: [usize; 3]) -> usize {
        let d = self.box_dims;
        match self.axis {
            0 => coords[1] + d[1] * coords[2],
            1 => coords[0] + d[0] * coords[2],
            _ => coords[0] + d[0] * coords[1],
        }
    }

    /// Extended-vector column of the voxel at box coordinates `coords`,
    /// or `None` when it lies outside the slab and its ghost planes.
    #[inline]
    pub fn column_of(&self, coords: [usize; 3]) -> Option<usize> {
        let plane = coords[self.axis];
        if plane >= self.start && plane < self.start + self.count {
            let mut local = coords;
            local[self.axis] = plane - self.start;
            Some(self.local_index(local))
        } else if self.has_lower() && plane + 1 == self.start {
            Some(self.lower_ghost_offset() + self.cs_index(coords))
        } else if self.has_upper() && plane == self.start + self.count {
            Some(self.upper_ghost_offset() + self.cs_index(coords))
        } else {
            None
        }
    }
}

/// One-plane staging buffers for halo traffic.
#[derive(Debug, Default, Clone)]
pub struct HaloBuffers {
    pub lower_send: Vec<f64>,
    pub upper_send: Vec<f64>,
    pub lower_recv: Vec<f64>,
    pub upper_recv: Vec<f64>,
}

/// Worker index within the active set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerTopology {
    pub rank: usize,
    pub p: usize,
}

impl WorkerTopology {
    pub fn lower(&self) -> Option<usize> {
        (self.rank > 0).then(|| self.rank - 1)
    }
    pub fn upper(&self) -> Option<usize> {
        (self.rank + 1 < self.p).then(|| self.rank + 1)
    }
}

/// Copies the values of box plane `plane` (along `axis`) into `out`,
/// cross-section order.
pub fn copy_plane(values: &[f64], dims: [usize; 3], axis: usize, plane: usize, out: &mut Vec<f64>) {
    out.clear();
    match axis {
        2 => {
            let cs = dims[0] * dims[1];
            out.extend_from_slice(&values[plane * cs..(plane + 1) * cs]);
        }
        1 => {
            for k in 0..dims[2] {
                let row = dims[0] * (plane + dims[1] * k);
                out.extend_from_slice(&values[row..row + dims[0]]);
            }
        }
        _ => {
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    out.push(values[plane + dims[0] * (j + dims[1] * k)]);
                }
            }
        }
    }
}

/// Owned-plane values of a slab, x-fastest over the slab dims.
pub fn extract_slab_values(
    values: &[f64],
    dims: [usize; 3],
    axis: usize,
    start: usize,
    count: usize,
) -> Vec<f64> {
    if axis == 2 {
        let cs = dims[0] * dims[1];
        return values[start * cs..(start + count) * cs].to_vec();
    }
    let slab = LocalSlab {
        box_dims: dims,
        axis,
        start,
        count,
    };
    let ld = slab.local_dims();
    let mut out = Vec::with_capacity(slab.n_local());
    for lk in 0..ld[2] {
        for lj in 0..ld[1] {
            for li in 0..ld[0] {
                let mut c = [li, lj, lk];
                c[axis] += start;
                out.push(values[c[0] + dims[0] * (c[1] + dims[1] * c[2])]);
            }
        }
    }
    out
}

/// Inverse of [`extract_slab_values`].
pub fn paste_slab_values(
    global: &mut [f64],
    dims: [usize; 3],
    axis: usize,
    start: usize,
    count: usize,
    local: &[f64],
) {
    if axis == 2 {
        let cs = dims[0] * dims[1];
        global[start * cs..(start + count) * cs].copy_from_slice(local);
        return;
    }
    let slab = LocalSlab {
        box_dims: dims,
        axis,
        start,
        count,
    };
    let ld = slab.local_dims();
    let mut at = 0;
    for lk in 0..ld[2] {
        for lj in 0..ld[1] {
            for li in 0..ld[0] {
                let mut c = [li, lj, lk];
                c[axis] += start;
                global[c[0] + dims[0] * (c[1] + dims[1] * c[2])] = local[at];
                at += 1;
            }
        }
    }
}

/// Rank-ascending global sum: every active worker receives the same total.
pub fn global_sum<T: Transport>(t: &mut T, active_p: usize, local: f64) -> Result<f64, CommError> {
    if active_p == 1 {
        return Ok(local);
    }
    if t.rank() == 0 {
        let mut total = local;
        for r in 1..active_p {
            let msg = t.recv(r)?;
            total += msg.payload[0];
        }
        for r in 1..active_p {
            t.send(r, Message::new(tag::SUM_TOTAL, 0, vec![total]))?;
        }
        Ok(total)
    } else {
        t.send(0, Message::new(tag::SUM_PART, 0, vec![local]))?;
        let msg = t.recv(0)?;
        expect_tag(&msg, tag::SUM_TOTAL)?;
        Ok(msg.payload[0])
    }
}

fn expect_tag(msg: &Message, want: u32) -> Result<(), CommError> {
    if msg.header.species != want {
        return Err(CommError::Protocol(format!(
            "expected tag {want}, got {} (plane {}, count {})",
            msg.header.species, msg.header.plane, msg.header.count
        )));
    }
    Ok(())
}

/// Distributes a rank-0 global box field to per-worker slabs. When
/// `with_ghosts` is set the returned values use the extended layout
/// (owned + ghost planes), which is what static per-voxel coefficient
/// fields need at assembly time.
pub fn scatter_slab<T: Transport>(
    t: &mut T,
    part: &SlabPartition,
    box_dims: [usize; 3],
    tag_id: u32,
    global: Option<&[f64]>,
    with_ghosts: bool,
) -> Result<Vec<f64>, CommError> {
    let p = part.workers();
    let build = |global: &[f64], rank: usize| -> Vec<f64> {
        let slab = part.slab(box_dims, rank);
        let mut vals = extract_slab_values(global, box_dims, part.axis, slab.start, slab.count);
        if with_ghosts {
            let mut plane = Vec::new();
            if slab.has_lower() {
                copy_plane(global, box_dims, part.axis, slab.start - 1, &mut plane);
                vals.extend_from_slice(&plane);
            }
            if slab.has_upper() {
                copy_plane(
                    global,
                    box_dims,
                    part.axis,
                    slab.start + slab.count,
                    &mut plane,
                );
                vals.extend_from_slice(&plane);
            }
        }
        vals
    };
    if t.rank() == 0 {
        let global = global.expect("rank 0 must supply the global field");
        for r in 1..p {
            let slab = part.slab(box_dims, r);
            t.send(r, Message::new(tag_id, slab.start as u32, build(global, r)))?;
        }
        Ok(build(global, 0))
    } else {
        let msg = t.recv(0)?;
        expect_tag(&msg, tag_id)?;
        Ok(msg.payload)
    }
}

/// Collects per-worker owned slabs into the global box field at rank 0.
pub fn gather_slab<T: Transport>(
    t: &mut T,
    part: &SlabPartition,
    box_dims: [usize; 3],
    tag_id: u32,
    local: &[f64],
) -> Result<Option<Vec<f64>>, CommError> {
    let p = part.workers();
    if t.rank() == 0 {
        let mut global = vec![0.0; box_dims[0] * box_dims[1] * box_dims[2]];
        let own = part.slab(box_dims, 0);
        paste_slab_values(
            &mut global,
            box_dims,
            part.axis,
            own.start,
            own.count,
            local,
        );
        for r in 1..p {
            let msg = t.recv(r)?;
            expect_tag(&msg, tag_id)?;
            let slab = part.slab(box_dims, r);
            if msg.payload.len() != slab.n_local() {
                return Err(CommError::Protocol(format!(
                    "gather from rank {r}: got {} values, slab holds {}",
                    msg.payload.len(),
                    slab.n_local()
                )));
            }
            paste_slab_values(
                &mut global,
                box_dims,
                part.axis,
                slab.start,
                slab.count,
                &msg.payload,
            );
        }
        Ok(Some(global))
    } else {
        let slab = part.slab(box_dims, t.rank());
        t.send(0, Message::new(tag_id, slab.start as u32, local.to_vec()))?;
        Ok(None)
    }
}

/// Refreshes the ghost planes of an extended vector from the neighbouring
/// slabs' adjacent owned planes. Box-boundary faces are left untouched;
/// boundary conditions are assembly's concern. Even ranks send before
/// receiving and odd ranks receive first, so the exchange cannot deadlock
/// on rendezvous transports.
pub fn exchange_halo<T: Transport>(
    t: &mut T,
    slab: &LocalSlab,
    topo: &WorkerTopology,
    species_tag: u32,
    x: &mut [f64],
    buffers: &mut HaloBuffers,
) -> Result<(), CommError> {
    debug_assert_eq!(x.len(), slab.n_cols());
    let cs = slab.cross_section();
    let ld = slab.local_dims();
    let halo_tag = tag::halo(species_tag);

    let stage = |x: &[f64], local_plane: usize, buf: &mut Vec<f64>| {
        copy_plane(&x[..slab.n_local()], ld, slab.axis, local_plane, buf);
    };
    let send_lower = |t: &mut T, buffers: &mut HaloBuffers, x: &[f64]| -> Result<(), CommError> {
        if let (true, Some(nb)) = (slab.has_lower(), topo.lower()) {
            stage(x, 0, &mut buffers.lower_send);
            t.send(
                nb,
                Message::new(halo_tag, slab.start as u32, buffers.lower_send.clone()),
            )?;
        }
        Ok(())
    };
    let send_upper = |t: &mut T, buffers: &mut HaloBuffers, x: &[f64]| -> Result<(), CommError> {
        if let (true, Some(nb)) = (slab.has_upper(), topo.upper()) {
            stage(x, slab.count - 1, &mut buffers.upper_send);
            t.send(
                nb,
                Message::new(
                    halo_tag,
                    (slab.start + slab.count - 1) as u32,
                    buffers.upper_send.clone(),
                ),
            )?;
        }
        Ok(())
    };
    let recv_lower =
        |t: &mut T, buffers: &mut HaloBuffers, x: &mut [f64]| -> Result<(), CommError> {
            if let (true, Some(nb)) = (slab.has_lower(), topo.lower()) {
                let msg = t.recv(nb)?;
                expect_tag(&msg, halo_tag)?;
                if msg.payload.len() != cs || msg.header.plane as usize != slab.start - 1 {
                    return Err(CommError::Protocol(format!(
                        "bad lower halo from rank {nb}: plane {}, count {}",
                        msg.header.plane, msg.header.count
                    )));
                }
                buffers.lower_recv = msg.payload;
                let off = slab.lower_ghost_offset();
                x[off..off + cs].copy_from_slice(&buffers.lower_recv);
            }
            Ok(())
        };
    let recv_upper =
        |t: &mut T, buffers: &mut HaloBuffers, x: &mut [f64]| -> Result<(), CommError> {
            if let (true, Some(nb)) = (slab.has_upper(), topo.upper()) {
                let msg = t.recv(nb)?;
                expect_tag(&msg, halo_tag)?;
                if msg.payload.len() != cs || msg.header.plane as usize != slab.start + slab.count {
                    return Err(CommError::Protocol(format!(
                        "bad upper halo from rank {nb}: plane {}, count {}",
                        msg.header.plane, msg.header.count
                    )));
                }
                buffers.upper_recv = msg.payload;
                let off = slab.upper_ghost_offset();
                x[off..off + cs].copy_from_slice(&buffers.upper_recv);
            }
            Ok(())
        };

    if topo.rank % 2 == 0 {
        send_lower(t, buffers, x)?;
        send_upper(t, buffers, x)?;
        recv_lower(t, buffers, x)?;
        recv_upper(t, buffers, x)?;
    } else {
        recv_lower(t, buffers, x)?;
        recv_upper(t, buffers, x)?;
        send_lower(t, buffers, x)?;
        send_upper(t, buffers, x)?;
    }
    Ok(())
}

/// [`SolverComm`] over a slab: sums span the active workers, halo refresh
/// swaps boundary planes with rank +/- 1.
pub struct SlabComm<'a, T: Transport> {
    pub transport: &'a mut T,
    pub slab: LocalSlab,
    pub topo: WorkerTopology,
    pub species_tag: u32,
    pub buffers: HaloBuffers,
}

impl<'a, T: Transport> SlabComm<'a, T> {
    pub fn new(
        transport: &'a mut T,
        slab: LocalSlab,
        topo: WorkerTopology,
        species_tag: u32,
    ) -> Self {
        Self {
            transport,
            slab,
            topo,
            species_tag,
            buffers: HaloBuffers::default(),
        }
    }
}

impl<T: Transport> SolverComm for SlabComm<'_, T> {
    fn global_sum(&mut self, local: f64) -> Result<f64, CommError> {
        global_sum(self.transport, self.topo.p, local)
    }
    fn refresh_halo(&mut self, x: &mut [f64]) -> Result<(), CommError> {
        exchange_halo(
            self.transport,
            &self.slab,
            &self.topo,
            self.species_tag,
            x,
            &mut self.buffers,
        )
    }
}
