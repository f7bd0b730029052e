//! Topic-based publish/subscribe broker with at-least-once delivery.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;

use crate::time::{seconds, Timestamp};

use super::{LinkProfile, NetError, RetryPolicy};

pub fn telemetry_topic(device_id: &str) -> String {
    format!("v1/devices/{device_id}/telemetry")
}

pub fn rpc_request_topic(device_id: &str) -> String {
    format!("v1/devices/{device_id}/rpc/request")
}

pub fn rpc_response_topic(device_id: &str) -> String {
    format!("v1/devices/{device_id}/rpc/response")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopicKind {
    Telemetry,
    RpcRequest,
    RpcResponse,
}

/// Splits a device topic into its device id and kind.
pub fn parse_topic(topic: &str) -> Option<(&str, TopicKind)> {
    let rest = topic.strip_prefix("v1/devices/")?;
    let (id, tail) = rest.split_once('/')?;
    let kind = match tail {
        "telemetry" => TopicKind::Telemetry,
        "rpc/request" => TopicKind::RpcRequest,
        "rpc/response" => TopicKind::RpcResponse,
        _ => return None,
    };
    (!id.is_empty()).then_some((id, kind))
}

/// MQTT filter matching with `+` (one level) and a trailing `#`.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

pub type SubscriberId = String;

/// One copy of a message on its way to one subscriber.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub message_id: u64,
    pub publisher: String,
    pub subscriber: SubscriberId,
    pub topic: String,
    pub payload: String,
    pub enqueued_at: Timestamp,
    pub delivered_at: Timestamp,
    /// Transmission attempt that produced this copy, starting at 1.
    pub attempt: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PublishOutcome {
    /// Copies scheduled for delivery; duplicates appear when an
    /// acknowledgement was lost and the sender retransmitted.
    Accepted { message_id: u64, copies: usize },
    /// Every attempt was lost.
    Failed { message_id: u64, attempts: u32 },
}

#[derive(Debug, Default)]
pub struct Broker {
    clients: BTreeSet<String>,
    subscriptions: Vec<(SubscriberId, String)>,
    inflight: BTreeMap<(Timestamp, u64), Envelope>,
    last_delivery: HashMap<(String, SubscriberId), Timestamp>,
    next_id: u64,
    seq: u64,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&mut self, client_id: &str) {
        self.clients.insert(client_id.to_string());
    }

    pub fn disconnect(&mut self, client_id: &str) {
        self.clients.remove(client_id);
        self.subscriptions.retain(|(s, _)| s != client_id);
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.clients.contains(client_id)
    }

    pub fn subscribe(&mut self, client_id: &str, filter: &str) -> Result<(), NetError> {
        if !self.is_connected(client_id) {
            return Err(NetError::NotConnected(client_id.to_string()));
        }
        let entry = (client_id.to_string(), filter.to_string());
        if !self.subscriptions.contains(&entry) {
            self.subscriptions.push(entry);
        }
        Ok(())
    }

    pub fn subscribers(&self, topic: &str) -> Vec<SubscriberId> {
        let mut out: Vec<SubscriberId> = self
            .subscriptions
            .iter()
            .filter(|(_, f)| topic_matches(f, topic))
            .map(|(s, _)| s.clone())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Publishes with QoS 1 semantics.
    ///
    /// Each attempt is lost with probability `loss_rate`; a lost attempt is
    /// retried after an exponential backoff. A delivered attempt whose
    /// acknowledgement is lost is retried too, which yields a duplicate.
    /// Deliveries from one publisher to one subscriber keep enqueue order.
    pub fn publish<R: Rng>(
        &mut self,
        now: Timestamp,
        publisher: &str,
        topic: &str,
        payload: String,
        profile: &LinkProfile,
        retry: &RetryPolicy,
        rng: &mut R,
    ) -> Result<PublishOutcome, NetError> {
        if !self.is_connected(publisher) {
            return Err(NetError::NotConnected(publisher.to_string()));
        }
        let subscribers = self.subscribers(topic);
        if subscribers.is_empty() {
            return Err(NetError::NoSubscriber(topic.to_string()));
        }
        self.next_id += 1;
        let message_id = self.next_id;
        let mut attempt_at = now;
        let mut deliveries = Vec::new();
        for attempt in 1..=retry.attempts {
            let lost = rng.random::<f64>() < profile.loss_rate;
            if !lost {
                deliveries.push((attempt, attempt_at + seconds(profile.sample_latency_s(rng))));
                let ack_lost = rng.random::<f64>() < profile.loss_rate;
                if !ack_lost {
                    break;
                }
            }
            attempt_at += seconds(retry.backoff_s(attempt));
        }
        if deliveries.is_empty() {
            return Ok(PublishOutcome::Failed {
                message_id,
                attempts: retry.attempts,
            });
        }
        let copies = deliveries.len() * subscribers.len();
        for sub in subscribers {
            for &(attempt, at) in &deliveries {
                let key = (publisher.to_string(), sub.clone());
                let floor = self
                    .last_delivery
                    .get(&key)
                    .map(|t| *t + chrono::Duration::microseconds(1));
                let delivered_at = floor.map_or(at, |f| f.max(at));
                self.last_delivery.insert(key, delivered_at);
                self.seq += 1;
                self.inflight.insert(
                    (delivered_at, self.seq),
                    Envelope {
                        message_id,
                        publisher: publisher.to_string(),
                        subscriber: sub.clone(),
                        topic: topic.to_string(),
                        payload: payload.clone(),
                        enqueued_at: now,
                        delivered_at,
                        attempt,
                    },
                );
            }
        }
        Ok(PublishOutcome::Accepted { message_id, copies })
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        self.inflight.keys().next().map(|k| k.0)
    }

    /// Removes and returns every envelope due at or before `now`, in delivery order.
    pub fn poll(&mut self, now: Timestamp) -> Vec<Envelope> {
        let mut out = Vec::new();
        while let Some(entry) = self.inflight.first_entry() {
            if entry.key().0 > now {
                break;
            }
            out.push(entry.remove());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::sim_epoch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn filters() {
        assert!(topic_matches("v1/devices/+/telemetry", "v1/devices/a/telemetry"));
        assert!(!topic_matches("v1/devices/+/telemetry", "v1/devices/a/rpc/request"));
        assert!(topic_matches("v1/devices/a/#", "v1/devices/a/rpc/request"));
        assert!(!topic_matches("v1/devices/a", "v1/devices/a/telemetry"));
        assert_eq!(parse_topic("v1/devices/t-1/rpc/response"), Some(("t-1", TopicKind::RpcResponse)));
        assert_eq!(parse_topic("v1/devices//telemetry"), None);
    }

    #[test]
    fn lossless_publish_arrives_after_latency() {
        let mut b = Broker::new();
        b.connect("dev");
        b.connect("platform");
        b.subscribe("platform", "v1/devices/+/telemetry").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let profile = LinkProfile::wifi();
        let out = b
            .publish(sim_epoch(), "dev", &telemetry_topic("dev"), "{}".into(), &profile, &RetryPolicy::default(), &mut rng)
            .unwrap();
        assert!(matches!(out, PublishOutcome::Accepted { copies: 1, .. }));
        let env = b.poll(sim_epoch() + chrono::Duration::seconds(1));
        assert_eq!(env.len(), 1);
        let lag = crate::time::as_seconds(env[0].delivered_at - env[0].enqueued_at);
        assert!((0.03..=0.07).contains(&lag), "{lag}");
    }

    #[test]
    fn unconnected_and_unsubscribed() {
        let mut b = Broker::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LinkProfile::wifi();
        let r = RetryPolicy::default();
        assert!(matches!(
            b.publish(sim_epoch(), "x", "t", String::new(), &p, &r, &mut rng),
            Err(NetError::NotConnected(_))
        ));
        b.connect("x");
        assert!(matches!(
            b.publish(sim_epoch(), "x", "t", String::new(), &p, &r, &mut rng),
            Err(NetError::NoSubscriber(_))
        ));
    }

    #[test]
    fn total_loss_fails_after_budget() {
        let mut b = Broker::new();
        b.connect("d");
        b.subscribe("d", "#").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LinkProfile {
            loss_rate: 1.0,
            ..LinkProfile::wifi()
        };
        let out = b
            .publish(sim_epoch(), "d", "a", String::new(), &p, &RetryPolicy::default(), &mut rng)
            .unwrap();
        assert_eq!(out, PublishOutcome::Failed { message_id: 1, attempts: 5 });
        assert_eq!(b.next_due(), None);
    }
}
