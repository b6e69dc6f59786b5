//! Cross-checks closed-form geometry and robust statistics against
//! independent re-derivations: solar angles via explicit unit vectors in the
//! east/north/up frame instead of spherical-trigonometry identities, and
//! per-slot medians via plain sorting.

use chrono::{DateTime, Datelike as _, NaiveDate, Timelike as _, Utc};
use rand::Rng as _;

use pvwatch::data::SLOTS_PER_DAY;
use pvwatch::predictors::seasonal_decompose;
use pvwatch::seeds;
use pvwatch::simulator::{clear_sky_power, sun_position};

/// Sun direction as a unit vector in (east, north, up) coordinates, built
/// from declination and hour angle without any elevation/azimuth formulas.
fn sun_vector_enu(latitude_deg: f64, ts: DateTime<Utc>) -> (f64, f64, f64) {
    let lat = latitude_deg.to_radians();
    let day_angle = std::f64::consts::TAU * (284.0 + ts.date_naive().ordinal() as f64) / 365.0;
    let decl = (23.45f64).to_radians() * day_angle.sin();
    let hour = ts.time().num_seconds_from_midnight() as f64 / 3600.0;
    let h = (15.0 * (hour - 12.0)).to_radians();

    let east = -decl.cos() * h.sin();
    let north = lat.cos() * decl.sin() - lat.sin() * decl.cos() * h.cos();
    let up = lat.sin() * decl.sin() + lat.cos() * decl.cos() * h.cos();
    (east, north, up)
}

fn wrap_degrees(x: f64) -> f64 {
    let mut d = x % 360.0;
    if d > 180.0 {
        d -= 360.0;
    }
    if d < -180.0 {
        d += 360.0;
    }
    d
}

fn test_grid() -> (Vec<f64>, Vec<NaiveDate>, Vec<DateTime<Utc>>) {
    let latitudes = vec![-35.0, 0.0, 20.0, 42.4, 60.0];
    let dates = vec![
        NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
        NaiveDate::from_ymd_opt(2021, 3, 21).unwrap(),
        NaiveDate::from_ymd_opt(2021, 6, 1).unwrap(),
        NaiveDate::from_ymd_opt(2021, 9, 23).unwrap(),
        NaiveDate::from_ymd_opt(2021, 12, 31).unwrap(),
    ];
    let mut times = Vec::new();
    for date in &dates {
        for minutes in (0..24 * 60).step_by(85) {
            let ts = date
                .and_hms_opt((minutes / 60) as u32, (minutes % 60) as u32, 0)
                .unwrap()
                .and_utc();
            times.push(ts);
        }
    }
    (latitudes, dates, times)
}

#[test]
fn sun_position_matches_vector_construction() {
    let (latitudes, _, times) = test_grid();
    let mut checked = 0usize;
    for &lat in &latitudes {
        for &ts in &times {
            let (el, az) = sun_position(lat, ts);
            let (east, north, up) = sun_vector_enu(lat, ts);
            let norm = (east * east + north * north + up * up).sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "sun vector must be unit length");

            let el_vec = up.asin().to_degrees();
            assert!(
                (el - el_vec).abs() < 1e-9,
                "elevation mismatch at lat {lat} {ts}: {el} vs {el_vec}"
            );

            // azimuth is numerically unstable straight up/down; skip there
            if el_vec.abs() < 89.0 {
                let az_vec = east.atan2(north).to_degrees();
                let diff = wrap_degrees(az - az_vec);
                assert!(
                    diff.abs() < 1e-9,
                    "azimuth mismatch at lat {lat} {ts}: {az} vs {az_vec}"
                );
            }
            checked += 1;
        }
    }
    assert!(checked > 400, "grid must exercise many geometries, got {checked}");
}

#[test]
fn clear_sky_power_matches_dot_product() {
    use pvwatch::data::PanelSpec;
    let (latitudes, _, times) = test_grid();
    let panels: Vec<PanelSpec> = [
        (0.0, 180.0, 1.0),
        (12.0, 180.0, 0.95),
        (30.0, 95.0, 1.0),
        (35.0, 180.0, 1.07),
        (90.0, 265.0, 1.0),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(tilt, az, gain))| PanelSpec {
        panel_id: format!("x{i}"),
        roof_plane: "t".into(),
        tilt_deg: tilt,
        azimuth_deg: az,
        capacity_w: 320.0,
        panel_gain: gain,
    })
    .collect();

    for &lat in &latitudes {
        for &ts in &times {
            let (east, north, up) = sun_vector_enu(lat, ts);
            for p in &panels {
                let got = clear_sky_power(p, ts, lat);
                // panel normal in the same east/north/up frame
                let tilt = p.tilt_deg.to_radians();
                let paz = p.azimuth_deg.to_radians();
                let n = (tilt.sin() * paz.sin(), tilt.sin() * paz.cos(), tilt.cos());
                let dot = n.0 * east + n.1 * north + n.2 * up;
                let expect = if up <= 0.0 {
                    0.0
                } else {
                    (p.capacity_w * p.panel_gain * dot.max(0.0)).min(p.capacity_w)
                };
                assert!(
                    (got - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                    "clear-sky power mismatch: lat {lat} {ts} tilt {} az {}: {got} vs {expect}",
                    p.tilt_deg,
                    p.azimuth_deg
                );
            }
        }
    }
}

#[test]
fn seasonal_profile_matches_sorted_medians() {
    let mut rng = seeds::rng(31, "median-oracle", &[]);
    for trial in 0..20 {
        let days = rng.random_range(7..20usize);
        let history: Vec<Vec<Option<f64>>> = (0..days)
            .map(|_| {
                (0..SLOTS_PER_DAY)
                    .map(|_| {
                        if rng.random_range(0..10) == 0 {
                            None
                        } else {
                            Some(rng.random_range(-50.0..50.0))
                        }
                    })
                    .collect()
            })
            .collect();
        let profile = seasonal_decompose(&history, 7).unwrap();
        for slot in 0..SLOTS_PER_DAY {
            let mut col: Vec<f64> = history.iter().filter_map(|d| d[slot]).collect();
            let expect = if col.is_empty() {
                0.0
            } else {
                col.sort_by(f64::total_cmp);
                let n = col.len();
                if n % 2 == 1 {
                    col[n / 2]
                } else {
                    0.5 * (col[n / 2 - 1] + col[n / 2])
                }
            };
            let got = profile.at(slot);
            assert!(
                (got - expect).abs() <= 1e-12,
                "median mismatch trial {trial} slot {slot}: {got} vs {expect}"
            );
        }
    }
}
