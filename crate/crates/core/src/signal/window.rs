use super::{resample, ANALYSIS_FS};
use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::ingest::{SessionRecording, ACC_CHANNELS, PPG_CHANNEL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    /// Common analysis rate in Hz.
    pub fs: f64,
    pub win_s: f64,
    pub stride_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { fs: ANALYSIS_FS, win_s: 8.0, stride_s: 2.0 }
    }
}

impl WindowConfig {
    pub fn win_len(&self) -> usize {
        (self.win_s * self.fs).round() as usize
    }

    pub fn stride_len(&self) -> usize {
        ((self.stride_s * self.fs).round() as usize).max(1)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.win_s > 0.0 && self.stride_s > 0.0) {
            return Err(Error::invalid(format!("invalid window configuration {self:?}")));
        }
        Ok(())
    }
}

/// PPG and acceleration resampled to one rate and cropped to their common
/// time span.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedStreams {
    pub t0: f64,
    pub fs: f64,
    pub ppg: Vec<f64>,
    pub acc: [Vec<f64>; 3],
}

impl AlignedStreams {
    pub fn len(&self) -> usize {
        self.ppg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ppg.is_empty()
    }

    pub fn time_of(&self, idx: usize) -> f64 {
        self.t0 + idx as f64 / self.fs
    }
}

pub fn aligned_streams(s: &SessionRecording, fs: f64) -> Result<AlignedStreams> {
    let names: Vec<&str> = std::iter::once(PPG_CHANNEL).chain(ACC_CHANNELS).collect();
    let mut chans = Vec::with_capacity(4);
    for name in &names {
        let ch = s
            .channels
            .get(*name)
            .ok_or_else(|| Error::invalid(format!("session {} has no `{name}` channel", s.subject_id)))?;
        chans.push(resample(ch, fs)?);
    }
    let start = chans.iter().map(|c| c.t0).fold(f64::NEG_INFINITY, f64::max);
    let offsets: Vec<usize> = chans.iter().map(|c| ((start - c.t0) * fs).round() as usize).collect();
    let len = chans
        .iter()
        .zip(&offsets)
        .map(|(c, &o)| c.samples.len().saturating_sub(o))
        .min()
        .unwrap_or(0);
    let mut cut = chans.iter().zip(&offsets).map(|(c, &o)| c.samples[o..o + len].to_vec());
    let ppg = cut.next().unwrap();
    let acc = [cut.next().unwrap(), cut.next().unwrap(), cut.next().unwrap()];
    Ok(AlignedStreams { t0: start, fs, ppg, acc })
}

/// Number of complete windows of `win` samples, advancing by `stride`, in a
/// stream of `len` samples.
pub(crate) fn frame_count(len: usize, win: usize, stride: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / stride + 1
    }
}

/// Cuts a session into fixed-length frames starting at `t0 + i * stride`.
/// Frames that would run past the end of any channel are omitted.
pub fn window_stream(s: &SessionRecording, cfg: &WindowConfig) -> Result<Vec<SampleFrame>> {
    cfg.check()?;
    let streams = aligned_streams(s, cfg.fs)?;
    Ok(frames_from_streams(s, &streams, cfg))
}

pub(crate) fn frames_from_streams(
    s: &SessionRecording,
    streams: &AlignedStreams,
    cfg: &WindowConfig,
) -> Vec<SampleFrame> {
    let (win, stride) = (cfg.win_len(), cfg.stride_len());
    (0..frame_count(streams.len(), win, stride))
        .map(|i| {
            let a = i * stride;
            let t0 = streams.time_of(a);
            let t_end = t0 + win as f64 / cfg.fs;
            SampleFrame {
                subject_id: s.subject_id.clone(),
                index: i,
                t0,
                fs: cfg.fs,
                ppg: streams.ppg[a..a + win].to_vec(),
                acc: [
                    streams.acc[0][a..a + win].to_vec(),
                    streams.acc[1][a..a + win].to_vec(),
                    streams.acc[2][a..a + win].to_vec(),
                ],
                hr: s.hr_at(t_end),
                activity: s.activity_containing(t0, t_end).map(str::to_string),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::tests::constant_session;

    #[test]
    fn sixty_seconds_gives_27_frames() {
        let s = constant_session(60.0, 32.0);
        let frames = window_stream(&s, &WindowConfig::default()).unwrap();
        assert_eq!(frames.len(), 27);
        assert!(frames.iter().all(|f| f.len() == 256 && f.acc.iter().all(|a| a.len() == 256)));
        assert_eq!(frames[3].t0, 6.0);
    }

    #[test]
    fn eight_seconds_gives_one_frame() {
        let s = constant_session(8.0, 32.0);
        assert_eq!(window_stream(&s, &WindowConfig::default()).unwrap().len(), 1);
    }

    #[test]
    fn short_session_gives_nothing() {
        let s = constant_session(7.5, 32.0);
        assert!(window_stream(&s, &WindowConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn ppg_at_64hz_is_brought_to_32() {
        let mut s = constant_session(20.0, 32.0);
        let ppg = s.channels.get_mut("ppg").unwrap();
        ppg.samples = vec![1.0; 20 * 64];
        ppg.fs = 64.0;
        let frames = window_stream(&s, &WindowConfig::default()).unwrap();
        assert_eq!(frames.len(), 7);
        assert!(frames.iter().all(|f| f.ppg.len() == 256));
    }

    #[test]
    fn shifted_acc_moves_start() {
        let mut s = constant_session(20.0, 32.0);
        for name in ACC_CHANNELS {
            s.channels.get_mut(name).unwrap().t0 = 0.5;
        }
        let frames = window_stream(&s, &WindowConfig::default()).unwrap();
        assert_eq!(frames[0].t0, 0.5);
        // 19.5 s of common coverage.
        assert_eq!(frames.len(), 6);
    }
}
