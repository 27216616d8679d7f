//! Fan-out of serialized telemetry frames to WebSocket subscribers.
//!
//! Each subscriber owns a bounded queue. Publishing never blocks: a
//! subscriber whose queue is full (or whose receiver is gone) is dropped.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use tokio::sync::mpsc;

pub const SUBSCRIBER_QUEUE: usize = 256;

pub type Frame = Arc<str>;

#[derive(Debug, Default)]
struct Inner {
    subscribers: Mutex<Vec<(u64, mpsc::Sender<Frame>)>>,
    next_id: AtomicU64,
    dropped: AtomicU64,
}

#[derive(Debug, Clone, Default)]
pub struct TelemetryHub {
    inner: Arc<Inner>,
}

impl TelemetryHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&self) -> mpsc::Receiver<Frame> {
        self.subscribe_with_capacity(SUBSCRIBER_QUEUE)
    }

    pub fn subscribe_with_capacity(&self, capacity: usize) -> mpsc::Receiver<Frame> {
        let (tx, rx) = mpsc::channel(capacity.max(1));
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.lock().push((id, tx));
        rx
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<(u64, mpsc::Sender<Frame>)>> {
        self.inner
            .subscribers
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn subscriber_count(&self) -> usize {
        self.lock().len()
    }

    /// Subscribers dropped so far for falling behind or disconnecting.
    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }

    /// Sends `frame` to every subscriber; returns how many received it.
    pub fn publish(&self, frame: Frame) -> usize {
        let mut subs = self.lock();
        let before = subs.len();
        subs.retain(|(_, tx)| tx.try_send(frame.clone()).is_ok());
        let kept = subs.len();
        self.inner
            .dropped
            .fetch_add((before - kept) as u64, Ordering::Relaxed);
        kept
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn delivers_in_order() {
        let hub = TelemetryHub::new();
        let mut rx = hub.subscribe();
        for i in 0..3 {
            assert_eq!(hub.publish(Arc::from(i.to_string())), 1);
        }
        for i in 0..3 {
            assert_eq!(&*rx.recv().await.unwrap(), i.to_string());
        }
    }

    #[tokio::test]
    async fn slow_subscriber_is_dropped() {
        let hub = TelemetryHub::new();
        let _slow = hub.subscribe_with_capacity(2);
        let mut fast = hub.subscribe();
        for _ in 0..3 {
            hub.publish(Arc::from("x"));
        }
        assert_eq!(hub.subscriber_count(), 1);
        assert_eq!(hub.dropped(), 1);
        assert_eq!(&*fast.recv().await.unwrap(), "x");
    }

    #[test]
    fn closed_subscriber_is_dropped() {
        let hub = TelemetryHub::new();
        drop(hub.subscribe());
        assert_eq!(hub.publish(Arc::from("x")), 0);
        assert_eq!(hub.subscriber_count(), 0);
    }
}
