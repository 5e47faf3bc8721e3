//! JSON-lines readers and writers for GPS trajectories and processed samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::geo::GpsPoint;
use super::traj::GpsTrajectory;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct GpsRow {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    travel_time: Option<f64>,
    points: Vec<[f64; 3]>,
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `{id, label?, travel_time?, points: [[lon, lat, t], ...]}` lines and
/// validates every trajectory.
pub fn read_gps(path: &Path) -> Result<Vec<GpsTrajectory>> {
    read_jsonl::<GpsRow>(path)?
        .into_iter()
        .map(|r| {
            let t = GpsTrajectory {
                id: r.id,
                points: r.points.iter().map(|p| GpsPoint::new(p[0], p[1], p[2])).collect(),
                label: r.label,
                travel_time: r.travel_time,
            };
            t.validate()?;
            Ok(t)
        })
        .collect()
}

pub fn write_gps(path: &Path, trajs: &[GpsTrajectory]) -> Result<()> {
    write_jsonl(
        path,
        trajs.iter().map(|t| GpsRow {
            id: t.id.clone(),
            label: t.label,
            travel_time: t.travel_time,
            points: t.points.iter().map(|p| [p.lon, p.lat, p.t]).collect(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let mut t = GpsTrajectory::new("a", vec![GpsPoint::new(1.5, 2.0, 10.0), GpsPoint::new(1.6, 2.1, 20.5)]).unwrap();
        t.label = Some(1);
        let u = GpsTrajectory::new("b", vec![GpsPoint::new(0.0, 0.0, 0.0), GpsPoint::new(0.1, 0.0, 1.0)]).unwrap();
        write_gps(&path, &[t.clone(), u.clone()]).unwrap();
        assert_eq!(read_gps(&path).unwrap(), vec![t, u]);
        assert!(matches!(read_gps(&dir.path().join("none")), Err(Error::NotFound(_))));
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"points\":[[0,0,0],[0,0,1]]}\nnot json\n").unwrap();
        let err = read_gps(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
