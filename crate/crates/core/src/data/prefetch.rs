use std::sync::mpsc::sync_channel;
use std::thread;

use super::BatchSource;
use crate::error::Result;
use crate::tensor::Tensor4;

/// Depth of the queue between the loader thread and the consumer.
pub const PREFETCH_DEPTH: usize = 2;

/// Walks `source` in order, `batch_size` samples at a time, decoding the next
/// batches on a helper thread while `consume` runs. Stops at the first error
/// from either side.
pub fn prefetch_batches<F>(source: &dyn BatchSource, batch_size: usize, mut consume: F) -> Result<()>
where
    F: FnMut(usize, Tensor4<f32>, Tensor4<f32>) -> Result<()>,
{
    let starts: Vec<usize> = (0..source.len()).step_by(batch_size.max(1)).collect();
    thread::scope(|scope| {
        let (tx, rx) = sync_channel(PREFETCH_DEPTH);
        scope.spawn(move || {
            for &start in &starts {
                let batch = source.batch(start, batch_size);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        for (i, batch) in rx.iter().enumerate() {
            let (x, y) = batch?;
            consume(i, x, y)?;
        }
        Ok(())
    })
}
