//! Scenario configuration loading. (in progress)
