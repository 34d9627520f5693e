//! Epoch-hour timestamps and civil date conversion.
//!
//! All series are hourly; a timestamp is the integer number of hours since
//! 1970-01-01T00:00Z. CSV files carry ISO-8601 UTC strings.

use crate::error::{Error, Result};

/// Days since 1970-01-01 for a proleptic Gregorian date.
pub fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = (y - era * 400) as i64;
    let mp = ((m + 9) % 12) as i64;
    let doy = (153 * mp + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

/// Inverse of `days_from_civil`.
pub fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719468;
    let era = if z >= 0 { z } else { z - 146096 } / 146097;
    let doe = z - era * 146097;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = (if mp < 10 { mp + 3 } else { mp - 9 }) as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

pub fn epoch_hour(y: i64, m: u32, d: u32, hour: u32) -> i64 {
    days_from_civil(y, m, d) * 24 + hour as i64
}

/// 1-based day of year for an epoch hour.
pub fn day_of_year(epoch_hour: i64) -> u32 {
    let day = epoch_hour.div_euclid(24);
    let (y, _, _) = civil_from_days(day);
    (day - days_from_civil(y, 1, 1) + 1) as u32
}

pub fn hour_of_day_utc(epoch_hour: i64) -> u32 {
    epoch_hour.rem_euclid(24) as u32
}

/// `YYYY-MM-DDTHH:00:00Z`
pub fn to_iso(epoch_hour: i64) -> String {
    let day = epoch_hour.div_euclid(24);
    let h = epoch_hour.rem_euclid(24);
    let (y, m, d) = civil_from_days(day);
    format!("{y:04}-{m:02}-{d:02}T{h:02}:00:00Z")
}

/// `YYYYMMDD` tag for per-day files.
pub fn date_tag(epoch_hour: i64) -> String {
    let (y, m, d) = civil_from_days(epoch_hour.div_euclid(24));
    format!("{y:04}{m:02}{d:02}")
}

pub fn from_iso(s: &str) -> Result<i64> {
    let bad = || Error::Data(format!("bad timestamp '{s}', expected YYYY-MM-DDTHH:00:00Z"));
    let b = s.as_bytes();
    if b.len() != 20 || b[4] != b'-' || b[7] != b'-' || b[10] != b'T' || b[13] != b':' || b[19] != b'Z'
    {
        return Err(bad());
    }
    let num = |range: std::ops::Range<usize>| -> Result<i64> {
        s[range].parse::<i64>().map_err(|_| bad())
    };
    let (y, m, d, h) = (num(0..4)?, num(5..7)? as u32, num(8..10)? as u32, num(11..13)?);
    let (mi, sec) = (num(14..16)?, num(17..19)?);
    if mi != 0 || sec != 0 {
        return Err(Error::Data(format!("timestamp '{s}' not on the hour")));
    }
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) || !(0..24).contains(&h) {
        return Err(bad());
    }
    Ok(days_from_civil(y, m, d) * 24 + h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_reference_points() {
        assert_eq!(days_from_civil(1970, 1, 1), 0);
        assert_eq!(days_from_civil(2021, 1, 1), 18628);
        assert_eq!(civil_from_days(18628), (2021, 1, 1));
    }

    #[test]
    fn civil_round_trip() {
        for z in (-200_000..200_000).step_by(733) {
            let (y, m, d) = civil_from_days(z);
            assert_eq!(days_from_civil(y, m, d), z, "day {z} -> {y}-{m}-{d}");
        }
    }

    #[test]
    fn iso_round_trip() {
        let h = epoch_hour(2021, 3, 14, 7);
        let s = to_iso(h);
        assert_eq!(s, "2021-03-14T07:00:00Z");
        assert_eq!(from_iso(&s).unwrap(), h);
    }

    #[test]
    fn rejects_non_hourly_and_malformed() {
        assert!(from_iso("2021-03-14T07:30:00Z").is_err());
        assert!(from_iso("2021-03-14 07:00:00Z").is_err());
        assert!(from_iso("garbage").is_err());
    }

    #[test]
    fn day_of_year_and_hour() {
        let h = epoch_hour(2021, 1, 1, 5);
        assert_eq!(day_of_year(h), 1);
        assert_eq!(hour_of_day_utc(h), 5);
        assert_eq!(day_of_year(epoch_hour(2021, 12, 31, 0)), 365);
        assert_eq!(day_of_year(epoch_hour(2020, 12, 31, 0)), 366); // leap year
    }

    #[test]
    fn date_tags() {
        assert_eq!(date_tag(epoch_hour(2021, 3, 1, 0)), "20210301");
        assert_eq!(date_tag(epoch_hour(2021, 3, 1, 23)), "20210301");
    }
}
