/// One analysis window: PPG, three acceleration axes and the label at the
/// window's end time.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFrame {
    pub subject_id: String,
    /// Position of the frame in its session's window sequence.
    pub index: usize,
    /// Start time in seconds.
    pub t0: f64,
    pub fs: f64,
    pub ppg: Vec<f64>,
    /// `acc[axis][sample]`, axes x, y, z.
    pub acc: [Vec<f64>; 3],
    /// Ground-truth heart rate in BPM, if known.
    pub hr: Option<f64>,
    /// Activity whose interval fully contains the frame; `None` for
    /// transition windows.
    pub activity: Option<String>,
}

impl SampleFrame {
    pub fn len(&self) -> usize {
        self.ppg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppg.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.ppg.len() as f64 / self.fs
    }

    /// Sample timestamps.
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.ppg.len()).map(move |i| self.t0 + i as f64 / self.fs)
    }
}
