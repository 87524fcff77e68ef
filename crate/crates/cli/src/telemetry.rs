//! Optional MQTT export of per-agent estimates.

use std::time::Duration;

use consensus_etkf::{ScenarioConfig, TraceLog};
use rumqttc::{Client, Event, MqttOptions, Outgoing, QoS, RecvTimeoutError};
use serde::{Deserialize, Serialize};
use url::Url;

const DEFAULT_PORT: u16 = 1883;
const CLIENT_ID: &str = "etkf-sim";

/// One estimate as published to `<prefix>/agent/<id>/estimate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryPayload {
    /// Simulation time of the estimation instant.
    pub ts_ms: u64,
    pub agent: usize,
    pub xhat: f64,
    /// State events the agent has sent so far.
    pub events: u64,
}

impl TelemetryPayload {
    pub fn topic(&self, prefix: &str) -> String {
        format!("{prefix}/agent/{}/estimate", self.agent)
    }
}

/// Endpoint settings.
#[derive(Debug, Clone)]
pub struct Telemetry {
    pub url: String,
    pub topic_prefix: String,
    /// Per-step wait for the broker before giving up.
    pub timeout: Duration,
}

impl Telemetry {
    pub fn new(url: &str, topic_prefix: &str) -> Self {
        Self {
            url: url.to_owned(),
            topic_prefix: topic_prefix.trim_end_matches('/').to_owned(),
            timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryReport {
    pub published: usize,
    /// Why publishing stopped early, if it did.
    pub error: Option<String>,
}

/// One payload per agent per estimation period, in time order.
pub fn payloads(trace: &TraceLog, config: &ScenarioConfig) -> Vec<TelemetryPayload> {
    let per_period = config.ticks_per_period();
    let n = config.n();
    let mut events = vec![0u64; n];
    let mut out = Vec::new();
    for (k, tick) in trace.rows.chunks(n).enumerate() {
        for row in tick {
            events[row.agent] += u64::from(row.event);
        }
        if k % per_period == 0 {
            out.extend(tick.iter().map(|row| TelemetryPayload {
                ts_ms: (row.t * 1000.0).round() as u64,
                agent: row.agent,
                xhat: row.xhat,
                events: events[row.agent],
            }));
        }
    }
    out
}

fn broker_options(url: &str) -> Result<MqttOptions, String> {
    let parsed = Url::parse(url).map_err(|e| format!("bad MQTT URL {url:?}: {e}"))?;
    if !matches!(parsed.scheme(), "mqtt" | "tcp") {
        return Err(format!("unsupported MQTT scheme {:?}", parsed.scheme()));
    }
    let host = parsed
        .host_str()
        .ok_or_else(|| format!("MQTT URL {url:?} has no host"))?;
    let mut opts = MqttOptions::new(CLIENT_ID, host, parsed.port().unwrap_or(DEFAULT_PORT));
    opts.set_keep_alive(Duration::from_secs(30));
    if !parsed.username().is_empty() {
        opts.set_credentials(parsed.username(), parsed.password().unwrap_or(""));
    }
    Ok(opts)
}

/// Publishes `messages` at QoS 0 and disconnects. Never fails: problems are
/// returned in the report.
pub fn publish(endpoint: &Telemetry, messages: &[TelemetryPayload]) -> TelemetryReport {
    let mut report = TelemetryReport {
        published: 0,
        error: None,
    };
    let opts = match broker_options(&endpoint.url) {
        Ok(o) => o,
        Err(e) => {
            report.error = Some(e);
            return report;
        }
    };
    let (client, mut connection) = Client::new(opts, messages.len() + 1);
    for m in messages {
        let body = serde_json::to_vec(m).expect("payload serializes");
        if let Err(e) = client.publish(
            m.topic(&endpoint.topic_prefix),
            QoS::AtMostOnce,
            false,
            body,
        ) {
            report.error = Some(e.to_string());
            return report;
        }
    }
    if let Err(e) = client.disconnect() {
        report.error = Some(e.to_string());
        return report;
    }
    loop {
        match connection.recv_timeout(endpoint.timeout) {
            Ok(Ok(Event::Outgoing(Outgoing::Publish(_)))) => report.published += 1,
            Ok(Ok(Event::Outgoing(Outgoing::Disconnect))) => break,
            Ok(Ok(_)) => {}
            Ok(Err(e)) => {
                report.error = Some(format!("MQTT connection: {e}"));
                break;
            }
            Err(RecvTimeoutError::Timeout) => {
                report.error = Some("MQTT broker did not respond in time".into());
                break;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use consensus_etkf::{paper_scenario, run_scenario};

    #[test]
    fn one_payload_per_agent_per_period() {
        let mut c = paper_scenario(false);
        c.duration_s = 3.0;
        let trace = run_scenario(&c).unwrap();
        let p = payloads(&trace, &c);
        assert_eq!(p.len(), 3 * 5);
        assert_eq!(p[0].ts_ms, 0);
        assert_eq!(p[5].ts_ms, 1000);
        assert!(p.iter().take(5).all(|m| m.events == 1));
        assert_eq!(p[7].topic("grid/mg1"), "grid/mg1/agent/2/estimate");
        let json = serde_json::to_value(&p[0]).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        for key in ["ts_ms", "agent", "xhat", "events"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn bad_urls_are_reported() {
        let r = publish(&Telemetry::new("http://x", "p"), &[]);
        assert!(r.error.unwrap().contains("scheme"));
        let r = publish(&Telemetry::new("not a url", "p"), &[]);
        assert!(r.error.is_some());
    }
}
