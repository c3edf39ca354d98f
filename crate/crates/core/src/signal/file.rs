//! Signal CSV files.
//!
//! ```text
//! #{"n_channels":2,"sample_rate_hz":128.0,...}
//! t,ch1,ch2
//! 0,0.25,-1.5
//! 1,0.3,-1.25
//! ```
//!
//! The first line is `#` followed by the [`SignalConfig`] as JSON. Voltages
//! are written in shortest round-trip form so a replay is bit-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{SampleFrame, SignalConfig, SignalError};

pub struct SignalWriter<W: Write> {
    out: W,
    n_channels: usize,
    line: String,
}

impl SignalWriter<BufWriter<File>> {
    pub fn create(path: &Path, cfg: &SignalConfig) -> Result<Self, SignalError> {
        Self::new(BufWriter::new(File::create(path)?), cfg)
    }
}

impl<W: Write> SignalWriter<W> {
    pub fn new(mut out: W, cfg: &SignalConfig) -> Result<Self, SignalError> {
        let sidecar = serde_json::to_string(cfg).map_err(|e| SignalError::Config(e.to_string()))?;
        writeln!(out, "#{sidecar}")?;
        let mut header = String::from("t");
        for n in 1..=cfg.n_channels {
            header.push_str(&format!(",ch{n}"));
        }
        writeln!(out, "{header}")?;
        Ok(Self { out, n_channels: cfg.n_channels, line: String::new() })
    }

    pub fn write_frame(&mut self, frame: &SampleFrame) -> Result<(), SignalError> {
        frame.check(self.n_channels)?;
        use std::fmt::Write as _;
        self.line.clear();
        let _ = write!(self.line, "{}", frame.t);
        for v in &frame.voltages {
            let _ = write!(self.line, ",{v}");
        }
        writeln!(self.out, "{}", self.line)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, SignalError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader; yields frames in file order.
pub struct SignalReader<R: Read> {
    config: SignalConfig,
    records: csv::StringRecordsIntoIter<R>,
}

impl SignalReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, SignalError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: BufRead> SignalReader<R> {
    pub fn new(mut input: R) -> Result<Self, SignalError> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        let json = first.trim_end().strip_prefix('#').ok_or_else(|| SignalError::Parse {
            line: 1,
            message: "missing '#' configuration header".into(),
        })?;
        let config: SignalConfig = serde_json::from_str(json)
            .map_err(|e| SignalError::Parse { line: 1, message: format!("bad configuration header: {e}") })?;
        config.validate()?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
        let header = reader
            .headers()
            .map_err(|e| SignalError::Parse { line: 2, message: e.to_string() })?
            .clone();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=config.n_channels).map(|n| format!("ch{n}")))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(SignalError::Parse {
                line: 2,
                message: format!("expected header {}", expected.join(",")),
            });
        }
        Ok(Self { config, records: reader.into_records() })
    }
}

impl<R: Read> SignalReader<R> {
    pub fn config(&self) -> &SignalConfig {
        &self.config
    }

    /// Next frame, `Ok(None)` at end of stream.
    pub fn next_frame(&mut self) -> Result<Option<SampleFrame>, SignalError> {
        let record = match self.records.next() {
            None => return Ok(None),
            Some(Err(e)) => {
                // the csv crate counts lines after the sidecar line
                let line = e.position().map(|p| p.line() + 1).unwrap_or(0);
                return Err(SignalError::Parse { line, message: e.to_string() });
            }
            Some(Ok(r)) => r,
        };
        let line = record.position().map(|p| p.line() + 1).unwrap_or(0);
        let n = self.config.n_channels;
        if record.len() != n + 1 {
            return Err(SignalError::Parse {
                line,
                message: format!("expected {} voltages, found {}", n, record.len().saturating_sub(1)),
            });
        }
        let t = record[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| SignalError::Parse { line, message: format!("bad sample index: {e}") })?;
        let voltages = record
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| SignalError::Parse { line, message: format!("bad voltage: {e}") })?;
        let frame = SampleFrame::new(t, voltages);
        frame.check(n).map_err(|e| SignalError::Parse { line, message: e.to_string() })?;
        Ok(Some(frame))
    }

    pub fn read_all(mut self) -> Result<(SignalConfig, Vec<SampleFrame>), SignalError> {
        let mut frames = Vec::new();
        while let Some(f) = self.next_frame()? {
            frames.push(f);
        }
        Ok((self.config, frames))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn two_channel() -> SignalConfig {
        SignalConfig { n_channels: 2, ..Default::default() }
    }

    fn encode(cfg: &SignalConfig, frames: &[SampleFrame]) -> Vec<u8> {
        let mut w = SignalWriter::new(Vec::new(), cfg).unwrap();
        for f in frames {
            w.write_frame(f).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn layout_is_header_then_rows() {
        let bytes = encode(&two_channel(), &[SampleFrame::new(0, vec![0.25, -1.5])]);
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("#{\"n_channels\":2"));
        assert_eq!(lines[1], "t,ch1,ch2");
        assert_eq!(lines[2], "0,0.25,-1.5");
    }

    #[test]
    fn three_frames_then_end_of_stream() {
        let frames: Vec<_> = (0..3).map(|t| SampleFrame::new(t, vec![t as f64, 1.0 / 3.0])).collect();
        let bytes = encode(&two_channel(), &frames);
        let mut r = SignalReader::new(Cursor::new(bytes)).unwrap();
        for f in &frames {
            assert_eq!(r.next_frame().unwrap().as_ref(), Some(f));
        }
        assert!(r.next_frame().unwrap().is_none());
    }

    #[test]
    fn short_row_cites_its_line() {
        let cfg = two_channel();
        let mut text = String::from_utf8(encode(&cfg, &[SampleFrame::new(0, vec![1.0, 2.0])])).unwrap();
        text.push_str("1,3.0\n");
        let mut r = SignalReader::new(Cursor::new(text.into_bytes())).unwrap();
        r.next_frame().unwrap();
        match r.next_frame() {
            Err(SignalError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fourteen_channel_header_with_missing_value() {
        let cfg = SignalConfig::default();
        let mut text = String::from_utf8(encode(&cfg, &[])).unwrap();
        let row: Vec<String> = std::iter::once("0".to_string()).chain((0..13).map(|_| "0.5".into())).collect();
        text.push_str(&row.join(","));
        text.push('\n');
        let mut r = SignalReader::new(Cursor::new(text.into_bytes())).unwrap();
        let err = r.next_frame().unwrap_err();
        assert!(matches!(err, SignalError::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("expected 14 voltages, found 13"));
    }

    #[test]
    fn missing_sidecar_is_rejected() {
        let err = SignalReader::new(Cursor::new(b"t,ch1\n0,1\n".to_vec())).err().unwrap();
        assert!(matches!(err, SignalError::Parse { line: 1, .. }));
    }

    #[test]
    fn bad_number_is_a_parse_error() {
        let cfg = SignalConfig { n_channels: 1, ..Default::default() };
        let mut text = String::from_utf8(encode(&cfg, &[])).unwrap();
        text.push_str("0,abc\n");
        let mut r = SignalReader::new(Cursor::new(text.into_bytes())).unwrap();
        assert!(matches!(r.next_frame(), Err(SignalError::Parse { line: 3, .. })));
    }
}
