use crate::error::{Error, Result};

/// Global average pooling as a running accumulator fed one image row at a
/// time in raster order. A row holds `channels * width` values, channel-major.
#[derive(Debug, Clone)]
pub struct StreamingAvgPool {
    channels: usize,
    width: usize,
    rows_expected: usize,
    rows_received: usize,
    partial: Vec<f64>,
}

impl StreamingAvgPool {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            width,
            rows_expected: height,
            rows_received: 0,
            partial: vec![0.0; channels],
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.channels * self.width {
            return Err(Error::ShapeMismatch(format!(
                "row of {} values, expected {}x{}",
                row.len(),
                self.channels,
                self.width
            )));
        }
        if self.rows_received == self.rows_expected {
            return Err(Error::InvalidArgument("frame already complete".into()));
        }
        for (c, chunk) in row.chunks_exact(self.width).enumerate() {
            self.partial[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        self.rows_received += 1;
        Ok(())
    }

    pub fn partial_sums(&self) -> &[f64] {
        &self.partial
    }

    /// Pixels accumulated so far.
    pub fn count(&self) -> usize {
        self.rows_received * self.width
    }

    pub fn finalize(&self) -> Result<Vec<f32>> {
        if self.rows_received != self.rows_expected {
            return Err(Error::IncompleteFrame {
                received: self.rows_received,
                expected: self.rows_expected,
            });
        }
        let n = self.count() as f64;
        Ok(self.partial.iter().map(|&s| (s / n) as f32).collect())
    }
}

/// Feed a CHW frame through the accumulator row by row.
pub fn stream_frame(frame: &[f32], channels: usize, height: usize, width: usize) -> Result<Vec<f32>> {
    if frame.len() != channels * height * width {
        return Err(Error::ShapeMismatch(format!(
            "frame of {} values for {channels}x{height}x{width}",
            frame.len()
        )));
    }
    let mut pool = StreamingAvgPool::new(channels, height, width);
    let mut row = vec![0.0f32; channels * width];
    for y in 0..height {
        for c in 0..channels {
            let src = (c * height + y) * width;
            row[c * width..(c + 1) * width].copy_from_slice(&frame[src..src + width]);
        }
        pool.push_row(&row)?;
    }
    pool.finalize()
}
