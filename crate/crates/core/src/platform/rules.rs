use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

use super::series::{Metric, PointValue, TimeSeriesPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "value", rename_all = "snake_case")]
pub enum Condition {
    Above(f64),
    Below(f64),
    Equals(PointValue),
}

impl Condition {
    pub fn matches(&self, v: &PointValue) -> bool {
        match (self, v) {
            (Self::Above(x), PointValue::Number(n)) => n > x,
            (Self::Below(x), PointValue::Number(n)) => n < x,
            (Self::Equals(want), got) => want == got,
            _ => false,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Self::Above(x) | Self::Below(x) => x.is_finite(),
            Self::Equals(PointValue::Number(x)) => x.is_finite(),
            Self::Equals(_) => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AlarmAction {
    Record,
    Webhook { url: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmRule {
    pub rule_id: String,
    pub metric: Metric,
    pub condition: Condition,
    pub severity: Severity,
    pub action: AlarmAction,
    pub message: String,
}

impl AlarmRule {
    pub fn new(rule_id: &str, metric: Metric, condition: Condition, severity: Severity, message: &str) -> Self {
        Self {
            rule_id: rule_id.into(),
            metric,
            condition,
            severity,
            action: AlarmAction::Record,
            message: message.into(),
        }
    }
}

/// Thresholds for temperature and humidity plus the tilt and water rules.
pub fn default_rules() -> Vec<AlarmRule> {
    use Condition::*;
    vec![
        AlarmRule::new("temp_low", Metric::TemperatureC, Below(10.0), Severity::Warning, "temperature below 10 °C"),
        AlarmRule::new("temp_high", Metric::TemperatureC, Above(40.0), Severity::Warning, "temperature above 40 °C"),
        AlarmRule::new("humidity_low", Metric::HumidityPct, Below(20.0), Severity::Warning, "humidity below 20 %"),
        AlarmRule::new("humidity_high", Metric::HumidityPct, Above(95.0), Severity::Warning, "humidity above 95 %"),
        AlarmRule::new(
            "tilt_overturned",
            Metric::Tilt,
            Equals(PointValue::State("overturned".into())),
            Severity::Critical,
            "device was tilted and the water inside it was spilled",
        ),
        AlarmRule::new(
            "water_absent",
            Metric::Water,
            Equals(PointValue::Flag(false)),
            Severity::Critical,
            "no water in the trap",
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub alarm_id: u64,
    pub rule_id: String,
    pub device_id: String,
    pub metric: Metric,
    pub ts: Timestamp,
    pub value: PointValue,
    pub severity: Severity,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WebhookCall {
    pub url: String,
    pub alarm_id: u64,
    pub body: String,
}

/// Edge-triggered rule evaluation: a rule fires when its condition becomes
/// true for a device and stays silent until it has been false again.
#[derive(Clone, Debug, Default)]
pub struct RuleEngine {
    rules: Vec<AlarmRule>,
    active: HashMap<(String, String), bool>,
    next_id: u64,
}

impl RuleEngine {
    pub fn new(rules: Vec<AlarmRule>) -> Self {
        Self {
            rules,
            active: HashMap::new(),
            next_id: 0,
        }
    }

    pub fn rules(&self) -> &[AlarmRule] {
        &self.rules
    }

    pub fn evaluate(&mut self, point: &TimeSeriesPoint) -> Vec<(Alarm, AlarmAction)> {
        let mut out = Vec::new();
        for rule in self.rules.iter().filter(|r| r.metric == point.key) {
            let matched = rule.condition.matches(&point.value);
            let was = self
                .active
                .insert((rule.rule_id.clone(), point.device_id.clone()), matched)
                .unwrap_or(false);
            if matched && !was {
                self.next_id += 1;
                out.push((
                    Alarm {
                        alarm_id: self.next_id,
                        rule_id: rule.rule_id.clone(),
                        device_id: point.device_id.clone(),
                        metric: point.key,
                        ts: point.ts,
                        value: point.value.clone(),
                        severity: rule.severity,
                        message: rule.message.clone(),
                    },
                    rule.action.clone(),
                ));
            }
        }
        out
    }
}

/// Stateless form used by tests and the REST layer: one alarm per matched
/// rule, ignoring history.
pub fn evaluate_rules(point: &TimeSeriesPoint, rules: &[AlarmRule]) -> Vec<String> {
    rules
        .iter()
        .filter(|r| r.metric == point.key && r.condition.matches(&point.value))
        .map(|r| r.rule_id.clone())
        .collect()
}
