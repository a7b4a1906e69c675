use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Seconds between the Unix epoch and 2000-01-01T00:00Z.
const EPOCH_2000_UNIX_SECS: u64 = 946_684_800;

/// Timestamp in whole minutes since 2000-01-01T00:00Z.
///
/// This is the only clock unit in the system: tag history records store it in
/// four octets and trace events carry it unchanged.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Minutes(pub u32);

impl Minutes {
    pub fn now() -> Self {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let minutes = secs.saturating_sub(EPOCH_2000_UNIX_SECS) / 60;
        Minutes(u32::try_from(minutes).unwrap_or(u32::MAX))
    }

    pub fn plus(self, minutes: u32) -> Self {
        Minutes(self.0.saturating_add(minutes))
    }
}

impl fmt::Display for Minutes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Civil date from days since 2000-01-01 (Howard Hinnant's algorithm, shifted epoch).
        let total = self.0 as i64;
        let (days, rem) = (total.div_euclid(1440), total.rem_euclid(1440));
        let z = days + 10_957 + 719_468;
        let era = z.div_euclid(146_097);
        let doe = z - era * 146_097;
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let day = doy - (153 * mp + 2) / 5 + 1;
        let month = if mp < 10 { mp + 3 } else { mp - 9 };
        let year = yoe + era * 400 + i64::from(month <= 2);
        write!(
            f,
            "{year:04}-{month:02}-{day:02}T{:02}:{:02}Z",
            rem / 60,
            rem % 60
        )
    }
}
