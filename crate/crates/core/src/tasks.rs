//! Control tasks and the metrics each one is scored on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    SignalTiming,
    HighwaySpeedLimit,
    RampMetering,
    BusScheduling,
    SubwayScheduling,
    TaxiDispatching,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::SignalTiming,
        TaskId::HighwaySpeedLimit,
        TaskId::RampMetering,
        TaskId::BusScheduling,
        TaskId::SubwayScheduling,
        TaskId::TaxiDispatching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::SignalTiming => "signal_timing",
            TaskId::HighwaySpeedLimit => "highway_speed_limit",
            TaskId::RampMetering => "ramp_metering",
            TaskId::BusScheduling => "bus_scheduling",
            TaskId::SubwayScheduling => "subway_scheduling",
            TaskId::TaxiDispatching => "taxi_dispatching",
        }
    }

    pub fn metrics(self) -> &'static [MetricKind] {
        use MetricKind::*;
        match self {
            TaskId::SignalTiming => &[Throughput, AvgWaiting, AvgTravel],
            TaskId::HighwaySpeedLimit => &[AvgTravel, AvgSpeed],
            TaskId::RampMetering => &[AvgTravel, AvgQueue],
            TaskId::BusScheduling => &[FuelKg, PassengerWaiting],
            TaskId::SubwayScheduling => &[ElectricityKwh, PassengerWaiting],
            TaskId::TaxiDispatching => &[Income, Dropoffs],
        }
    }

    /// Modules this one influences through shared infrastructure.
    pub fn affects(self) -> &'static [TaskId] {
        match self {
            TaskId::SignalTiming => &[TaskId::BusScheduling, TaskId::TaxiDispatching],
            TaskId::HighwaySpeedLimit => &[TaskId::RampMetering],
            _ => &[],
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task \"{s}\""))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Vehicles leaving the network per hour.
    Throughput,
    /// Mean accumulated stopped time per vehicle, seconds.
    AvgWaiting,
    /// Mean departure-to-exit time, seconds.
    AvgTravel,
    /// Distance over time spent on highway segments, m/s.
    AvgSpeed,
    /// Time-averaged vehicles queued per ramp lane.
    AvgQueue,
    FuelKg,
    /// Mean passenger wait at stations, seconds.
    PassengerWaiting,
    ElectricityKwh,
    Income,
    Dropoffs,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(
            self,
            MetricKind::Throughput | MetricKind::AvgSpeed | MetricKind::Income | MetricKind::Dropoffs
        )
    }

    /// Column label in report tables.
    pub fn column(self) -> &'static str {
        match self {
            MetricKind::Throughput => "Throughput",
            MetricKind::AvgWaiting => "Wait",
            MetricKind::AvgTravel => "Travel",
            MetricKind::AvgSpeed => "Speed",
            MetricKind::AvgQueue => "Queue",
            MetricKind::FuelKg => "Fuel",
            MetricKind::PassengerWaiting => "Passenger Wait",
            MetricKind::ElectricityKwh => "Electricity",
            MetricKind::Income => "Income",
            MetricKind::Dropoffs => "Drop-off",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or_default())
    }
}
