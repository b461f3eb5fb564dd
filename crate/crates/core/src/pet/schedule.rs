use crate::error::{invalid, Error, Result};

/// Frame boundaries of a dynamic acquisition, in seconds.
///
/// Frame `j` (1-based) spans `(t_{j-1}, t_j]`, with `t_0` the start of the
/// first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSchedule {
    start: f64,
    ends: Vec<f64>,
}

impl FrameSchedule {
    pub fn new(start: f64, ends: Vec<f64>) -> Result<Self> {
        if ends.is_empty() {
            return Err(invalid("frame schedule needs at least one frame"));
        }
        let mut prev = start;
        for &t in &ends {
            if !(t > prev) || !t.is_finite() {
                return Err(invalid(format!("frame end times must strictly increase, found {t} after {prev}")));
            }
            prev = t;
        }
        Ok(Self { start, ends })
    }

    /// Builds a schedule starting at zero from consecutive frame durations.
    pub fn from_durations(durations: &[f64]) -> Result<Self> {
        let mut t = 0.0;
        let ends = durations
            .iter()
            .map(|d| {
                t += d;
                t
            })
            .collect();
        Self::new(0.0, ends)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn ends(&self) -> &[f64] {
        &self.ends
    }

    pub fn frame_count(&self) -> usize {
        self.ends.len()
    }

    pub fn last(&self) -> f64 {
        *self.ends.last().expect("non-empty")
    }

    pub fn durations(&self) -> Vec<f64> {
        let mut prev = self.start;
        self.ends
            .iter()
            .map(|&t| {
                let d = t - prev;
                prev = t;
                d
            })
            .collect()
    }

    /// CSV with header `t_end_s`; `#` lines are comments. Frames start at zero.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match rows.next() {
            Some("t_end_s") => {}
            other => return Err(Error::Parse(format!("expected header t_end_s, got {other:?}"))),
        }
        let ends = rows
            .map(|r| r.parse::<f64>().map_err(|_| Error::Parse(format!("bad frame end time {r:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(0.0, ends)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_end_s\n");
        for t in &self.ends {
            out.push_str(&format!("{t}\n"));
        }
        out
    }

    /// The bundled 50-frame acquisition schedule.
    pub fn default_schedule() -> Self {
        Self::parse_csv(include_str!("../../data/frames_default.csv")).expect("bundled schedule parses")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_and_validation() {
        let s = FrameSchedule::from_durations(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(s.ends(), &[10.0, 30.0, 60.0]);
        assert_eq!(s.durations(), vec![10.0, 20.0, 30.0]);
        assert!(FrameSchedule::new(0.0, vec![5.0, 5.0]).is_err());
        assert!(FrameSchedule::new(0.0, vec![]).is_err());
        assert!(FrameSchedule::new(10.0, vec![5.0]).is_err());
        assert_eq!(FrameSchedule::parse_csv(&s.to_csv()).unwrap(), s);
    }

    #[test]
    fn default_schedule_transcribes_listing() {
        let s = FrameSchedule::default_schedule();
        assert_eq!(s.frame_count(), 50);
        let d = s.durations();
        assert_eq!(d[0], 30.0);
        assert_eq!(&d[1..4], &[10.0; 3]);
        assert_eq!(&d[48..], &[600.0, 600.0]);
        assert_eq!(s.last(), 8265.0);
    }
}
