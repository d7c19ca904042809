//! GPU memory allocations and busy-time bookkeeping.

use serde::{Deserialize, Serialize};

use super::SimError;

/// Default length of the load-screening window, in seconds.
pub const DEFAULT_WINDOW_S: f64 = 120.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gpu {
    pub id: usize,
    pub capacity: f64,
    pub allocated: f64,
    /// Sorted, non-overlapping `[start, end)` intervals.
    pub busy_intervals: Vec<(f64, f64)>,
}

impl Gpu {
    pub fn free(&self) -> f64 {
        self.capacity - self.allocated
    }

    /// Memory the planner may still hand out once `buffer` of the capacity is
    /// held back.
    pub fn usable_free(&self, buffer: f64) -> f64 {
        self.capacity * (1.0 - buffer) - self.allocated
    }

    pub fn busy_seconds(&self) -> f64 {
        self.busy_intervals.iter().map(|(s, e)| e - s).sum()
    }

    /// Busy seconds overlapping `[lo, hi]`.
    pub fn busy_between(&self, lo: f64, hi: f64) -> f64 {
        let first = self.busy_intervals.partition_point(|&(_, e)| e <= lo);
        self.busy_intervals[first..]
            .iter()
            .take_while(|&&(s, _)| s < hi)
            .map(|&(s, e)| e.min(hi) - s.max(lo))
            .filter(|d| *d > 0.0)
            .sum()
    }

    fn mark_busy(&mut self, start: f64, end: f64) {
        if end <= start {
            return;
        }
        let at = self.busy_intervals.partition_point(|&(s, _)| s < start);
        // merge with a touching predecessor to keep the list short
        if at > 0 && at == self.busy_intervals.len() {
            let last = self.busy_intervals.last_mut().unwrap();
            if (last.1 - start).abs() < 1e-12 {
                last.1 = end;
                return;
            }
        }
        self.busy_intervals.insert(at, (start, end));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub gpus: Vec<Gpu>,
    pub window: f64,
    pub now: f64,
}

impl ClusterState {
    pub fn new(num_gpus: usize, capacity_gb: f64) -> Self {
        Self::with_capacities(&vec![capacity_gb; num_gpus])
    }

    pub fn with_capacities(capacities: &[f64]) -> Self {
        ClusterState {
            gpus: capacities
                .iter()
                .enumerate()
                .map(|(id, &capacity)| Gpu {
                    id,
                    capacity,
                    allocated: 0.0,
                    busy_intervals: Vec::new(),
                })
                .collect(),
            window: DEFAULT_WINDOW_S,
            now: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.gpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gpus.is_empty()
    }

    pub fn gpu(&self, id: usize) -> Result<&Gpu, SimError> {
        self.gpus.get(id).ok_or(SimError::UnknownGpu(id))
    }

    fn gpu_mut(&mut self, id: usize) -> Result<&mut Gpu, SimError> {
        self.gpus.get_mut(id).ok_or(SimError::UnknownGpu(id))
    }

    /// Fraction of the trailing window GPU `id` spent busy. Before a full
    /// window has elapsed the elapsed time is used as the denominator.
    pub fn gpu_load(&self, id: usize, now: f64) -> Result<f64, SimError> {
        let gpu = self.gpu(id)?;
        let span = self.window.min(now);
        if span <= 0.0 {
            return Ok(0.0);
        }
        let busy = gpu.busy_between(now - span, now);
        Ok((busy / span).clamp(0.0, 1.0))
    }

    /// Loads of all GPUs at the cluster's current time.
    pub fn loads(&self) -> Vec<f64> {
        (0..self.gpus.len())
            .map(|i| self.gpu_load(i, self.now).expect("index in range"))
            .collect()
    }

    pub fn allocate(&mut self, id: usize, gb: f64) -> Result<(), SimError> {
        let gpu = self.gpu_mut(id)?;
        if gpu.allocated + gb > gpu.capacity + 1e-9 {
            return Err(SimError::OutOfMemory {
                gpu: id,
                requested: gb,
                free: gpu.free(),
            });
        }
        gpu.allocated += gb;
        Ok(())
    }

    pub fn release(&mut self, id: usize, gb: f64) -> Result<(), SimError> {
        let gpu = self.gpu_mut(id)?;
        gpu.allocated = (gpu.allocated - gb).max(0.0);
        Ok(())
    }

    pub fn mark_busy(&mut self, id: usize, start: f64, end: f64) -> Result<(), SimError> {
        self.gpu_mut(id)?.mark_busy(start, end);
        Ok(())
    }

    pub fn total_allocated(&self) -> f64 {
        self.gpus.iter().map(|g| g.allocated).sum()
    }

    pub fn busy_seconds(&self) -> f64 {
        self.gpus.iter().map(Gpu::busy_seconds).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_examples() {
        let mut c = ClusterState::new(2, 48.0);
        c.mark_busy(0, 100.0, 160.0).unwrap();
        assert!((c.gpu_load(0, 200.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(c.gpu_load(1, 200.0).unwrap(), 0.0);
        assert_eq!(c.gpu_load(0, 0.0).unwrap(), 0.0);

        let mut c = ClusterState::new(1, 48.0);
        c.mark_busy(0, 0.0, 30.0).unwrap();
        assert!((c.gpu_load(0, 60.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(c.gpu_load(3, 1.0), Err(SimError::UnknownGpu(3))));
    }

    #[test]
    fn in_flight_work_is_clipped_at_now() {
        let mut c = ClusterState::new(1, 48.0);
        c.mark_busy(0, 50.0, 500.0).unwrap();
        assert!((c.gpu_load(0, 100.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn touching_intervals_merge() {
        let mut c = ClusterState::new(1, 48.0);
        c.mark_busy(0, 0.0, 1.0).unwrap();
        c.mark_busy(0, 1.0, 2.5).unwrap();
        c.mark_busy(0, 4.0, 5.0).unwrap();
        assert_eq!(c.gpus[0].busy_intervals, vec![(0.0, 2.5), (4.0, 5.0)]);
        assert!((c.busy_seconds() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn allocation_respects_capacity() {
        let mut c = ClusterState::new(1, 10.0);
        c.allocate(0, 6.0).unwrap();
        assert!(c.allocate(0, 5.0).is_err());
        c.release(0, 6.0).unwrap();
        assert_eq!(c.gpus[0].allocated, 0.0);
    }
}
