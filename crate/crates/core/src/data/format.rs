//! Line-delimited JSON dataset format.
//!
//! Every line is one object tagged with `kind`. The first line is a header:
//!
//! ```text
//! {"kind":"header","format":"dme-dataset","version":1,"dtw_weights":{"w_pos":40.0,"w_rot":1.0,"w_grip":1.0}}
//! {"kind":"scene","id":"s0","sensor_origin":[1.0,0.0,0.3],"points":[[0.0,0.1,0.2]],"candidates":[[0]],"pointing_hint":null}
//! {"kind":"manual","id":"m0","scene":"s0"}
//! {"kind":"part","id":"p0","scene":"s0","points":[0],"frame":{"origin":[0,0,0],"axes":[[1,0,0],[0,1,0],[0,0,1]]}}
//! {"kind":"instruction","id":"l0","manual":"m0","step":0,"text":"turn the knob"}
//! {"kind":"trajectory","id":"t0","waypoints":[{"p":[0,0,0],"q":[1,0,0,0],"g":"open"}]}
//! {"kind":"task","id":"k0","part":"p0","instruction":"l0","demos":["t0"],"optimal":"t0"}
//! ```
//!
//! Positions are meters, quaternions `(w, x, y, z)`, frame axes are listed
//! as the x, y and z axis vectors. Floats are written in shortest
//! round-trip form, so `load(save(d)) == d` bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::*;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "dme-dataset";

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Rescale non-unit quaternions instead of rejecting them.
    pub auto_normalize: bool,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    origin: [f64; 3],
    axes: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct WaypointRecord {
    p: [f64; 3],
    q: [f64; 4],
    g: Gripper,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Header {
        format: String,
        version: u32,
        dtw_weights: DtwWeights,
    },
    Scene {
        id: String,
        sensor_origin: [f64; 3],
        points: Vec<[f64; 3]>,
        #[serde(default)]
        candidates: Vec<Vec<usize>>,
        #[serde(default)]
        pointing_hint: Option<[f64; 3]>,
    },
    Manual {
        id: String,
        scene: String,
    },
    Part {
        id: String,
        scene: String,
        points: Vec<usize>,
        frame: FrameRecord,
    },
    Instruction {
        id: String,
        manual: String,
        step: usize,
        text: String,
    },
    Trajectory {
        id: String,
        waypoints: Vec<WaypointRecord>,
    },
    Task {
        id: String,
        part: String,
        instruction: String,
        demos: Vec<String>,
        optimal: String,
    },
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn a3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn load_dataset(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), opts)
}

pub fn read_dataset(reader: impl Read, opts: LoadOptions) -> Result<Dataset> {
    let reader = BufReader::new(reader);
    let mut weights = None;
    let mut scenes = Vec::new();
    let mut parts = Vec::new();
    let mut manuals = Vec::new();
    let mut instructions = Vec::new();
    let mut trajectories = Vec::new();
    let mut tasks = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        match rec {
            Record::Header {
                format,
                version,
                dtw_weights,
            } => {
                if weights.is_some() {
                    return Err(parse_err("duplicate header".into()));
                }
                if format != FORMAT_NAME || version != FORMAT_VERSION {
                    return Err(parse_err(format!("unsupported format {format} v{version}")));
                }
                weights = Some(dtw_weights);
            }
            _ if weights.is_none() => return Err(parse_err("first record must be the header".into())),
            Record::Scene {
                id,
                sensor_origin,
                points,
                candidates,
                pointing_hint,
            } => scenes.push(Scene {
                id,
                cloud: PointCloud {
                    points: points.into_iter().map(v3).collect(),
                    sensor_origin: v3(sensor_origin),
                },
                candidates,
                pointing_hint: pointing_hint.map(v3),
            }),
            Record::Manual { id, scene } => manuals.push(Manual { id, scene_id: scene }),
            Record::Part {
                id,
                scene,
                points,
                frame,
            } => {
                let [x, y, z] = frame.axes.map(v3);
                parts.push(SegmentedPart {
                    id,
                    scene_id: scene,
                    point_indices: points,
                    frame: Frame {
                        origin: v3(frame.origin),
                        axes: Matrix3::from_columns(&[x, y, z]),
                    },
                })
            }
            Record::Instruction { id, manual, step, text } => instructions.push(Instruction {
                id,
                text,
                manual_id: manual,
                step_index: step,
            }),
            Record::Trajectory { id, waypoints } => {
                let mut out = Vec::with_capacity(waypoints.len());
                for w in waypoints {
                    let mut q = Quat::from(w.q);
                    if opts.auto_normalize && !q.is_unit() {
                        q = q
                            .normalized()
                            .ok_or_else(|| Error::Invariant(format!("trajectory `{id}` has a zero quaternion")))?;
                    }
                    out.push(Waypoint {
                        position: v3(w.p),
                        orientation: q,
                        gripper: w.g,
                    });
                }
                trajectories.push(Trajectory { id, waypoints: out });
            }
            Record::Task {
                id,
                part,
                instruction,
                demos,
                optimal,
            } => tasks.push(TaskExample {
                id,
                part_id: part,
                instruction_id: instruction,
                demos,
                optimal,
            }),
        }
    }
    let weights = weights.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing header".into(),
    })?;
    Dataset::new(weights, scenes, parts, manuals, instructions, trajectories, tasks)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    let mut emit = |rec: &Record| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")
    };
    emit(&Record::Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        dtw_weights: ds.dtw_weights,
    })?;
    for s in ds.scenes() {
        emit(&Record::Scene {
            id: s.id.clone(),
            sensor_origin: a3(&s.cloud.sensor_origin),
            points: s.cloud.points.iter().map(a3).collect(),
            candidates: s.candidates.clone(),
            pointing_hint: s.pointing_hint.as_ref().map(a3),
        })?;
    }
    for m in ds.manuals() {
        emit(&Record::Manual {
            id: m.id.clone(),
            scene: m.scene_id.clone(),
        })?;
    }
    for p in ds.parts() {
        let axes = [0, 1, 2].map(|c| a3(&p.frame.axes.column(c).into_owned()));
        emit(&Record::Part {
            id: p.id.clone(),
            scene: p.scene_id.clone(),
            points: p.point_indices.clone(),
            frame: FrameRecord {
                origin: a3(&p.frame.origin),
                axes,
            },
        })?;
    }
    for l in ds.instructions() {
        emit(&Record::Instruction {
            id: l.id.clone(),
            manual: l.manual_id.clone(),
            step: l.step_index,
            text: l.text.clone(),
        })?;
    }
    for t in ds.trajectories() {
        emit(&Record::Trajectory {
            id: t.id.clone(),
            waypoints: t
                .waypoints
                .iter()
                .map(|w| WaypointRecord {
                    p: a3(&w.position),
                    q: w.orientation.into(),
                    g: w.gripper,
                })
                .collect(),
        })?;
    }
    for t in ds.tasks() {
        emit(&Record::Task {
            id: t.id.clone(),
            part: t.part_id.clone(),
            instruction: t.instruction_id.clone(),
            demos: t.demos.clone(),
            optimal: t.optimal.clone(),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"kind":"header","format":"dme-dataset","version":1,"dtw_weights":{"w_pos":40.0,"w_rot":1.0,"w_grip":1.0}}"#;

    fn small(quat: &str, task_demo: &str) -> String {
        [
            HEADER.to_string(),
            r#"{"kind":"scene","id":"s0","sensor_origin":[1.0,0.0,0.5],"points":[[0.0,0.0,0.0],[0.01,0.0,0.0]]}"#.into(),
            r#"{"kind":"manual","id":"m0","scene":"s0"}"#.into(),
            r#"{"kind":"part","id":"p0","scene":"s0","points":[0,1],"frame":{"origin":[0,0,0],"axes":[[1,0,0],[0,1,0],[0,0,1]]}}"#.into(),
            r#"{"kind":"instruction","id":"l0","manual":"m0","step":0,"text":"turn the knob"}"#.into(),
            format!(r#"{{"kind":"trajectory","id":"t0","waypoints":[{{"p":[0,0,0],"q":{quat},"g":"open"}}]}}"#),
            r#"{"kind":"trajectory","id":"t1","waypoints":[{"p":[0.1,0,0],"q":[1,0,0,0],"g":"closed"}]}"#.into(),
            format!(r#"{{"kind":"task","id":"k0","part":"p0","instruction":"l0","demos":["t0","{task_demo}"],"optimal":"t0"}}"#),
        ]
        .join("\n")
    }

    #[test]
    fn loads_counts() {
        let ds = read_dataset(small("[1,0,0,0]", "t1").as_bytes(), LoadOptions::default()).unwrap();
        assert_eq!(ds.scenes().len(), 1);
        assert_eq!(ds.parts().len(), 1);
        assert_eq!(ds.instructions().len(), 1);
        assert_eq!(ds.trajectories().len(), 2);
        assert_eq!(ds.tasks().len(), 1);
    }

    #[test]
    fn dangling_trajectory_is_integrity_error() {
        let err = read_dataset(small("[1,0,0,0]", "t9").as_bytes(), LoadOptions::default()).unwrap_err();
        match err {
            Error::Integrity(msg) => assert!(msg.contains("t9"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn non_unit_quaternion_rejected_unless_normalizing() {
        let text = small("[2,0,0,0]", "t1");
        let err = read_dataset(text.as_bytes(), LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
        let ds = read_dataset(text.as_bytes(), LoadOptions { auto_normalize: true }).unwrap();
        assert_eq!(ds.trajectory("t0").unwrap().waypoints[0].orientation, Quat::IDENTITY);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{HEADER}\n{{\"kind\":\"scene\",\"id\":3}}\n");
        match read_dataset(text.as_bytes(), LoadOptions::default()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn header_must_come_first() {
        let text = r#"{"kind":"manual","id":"m0","scene":"s0"}"#;
        assert!(matches!(
            read_dataset(text.as_bytes(), LoadOptions::default()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut buf = Vec::new();
        write_dataset(&Dataset::empty(), &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), LoadOptions::default()).unwrap();
        assert_eq!(back, Dataset::empty());
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let err = save_dataset(&Dataset::empty(), "/nonexistent-dir/x/y.jsonl").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
