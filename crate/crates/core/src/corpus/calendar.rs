use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Weekday};

use crate::error::{Error, Result};

/// Sorted list of trading days.
#[derive(Debug, Clone, PartialEq)]
pub struct TradingCalendar {
    days: Vec<NaiveDate>,
}

impl TradingCalendar {
    pub fn new(mut days: Vec<NaiveDate>) -> Result<Self> {
        days.sort();
        days.dedup();
        if days.is_empty() {
            return Err(Error::Data("empty trading calendar".into()));
        }
        Ok(Self { days })
    }

    /// Monday–Friday between `first` and `last`, inclusive.
    pub fn weekdays(first: NaiveDate, last: NaiveDate) -> Result<Self> {
        let days = first
            .iter_days()
            .take_while(|d| *d <= last)
            .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
            .collect();
        Self::new(days)
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn first(&self) -> NaiveDate {
        self.days[0]
    }

    pub fn last(&self) -> NaiveDate {
        *self.days.last().expect("calendar is non-empty")
    }

    pub fn is_trading_day(&self, d: NaiveDate) -> bool {
        self.days.binary_search(&d).is_ok()
    }

    /// First trading day strictly after `d`.
    pub fn next_after(&self, d: NaiveDate) -> Option<NaiveDate> {
        let k = self.days.partition_point(|x| *x <= d);
        self.days.get(k).copied()
    }

    /// The trading day an article's information is first tradable.
    ///
    /// Publications at or before 09:30 on a trading day belong to that day;
    /// anything later, or on a non-trading day, rolls to the next trading day.
    pub fn assign_trading_date(&self, published_at: NaiveDateTime) -> Result<NaiveDate> {
        let date = published_at.date();
        let coverage = || Error::CalendarCoverage {
            date,
            first: self.first(),
            last: self.last(),
        };
        if date < self.first() || date > self.last() {
            return Err(coverage());
        }
        let open = NaiveTime::from_hms_opt(9, 30, 0).expect("valid time");
        if self.is_trading_day(date) && published_at.time() <= open {
            return Ok(date);
        }
        self.next_after(date).ok_or_else(coverage)
    }
}
