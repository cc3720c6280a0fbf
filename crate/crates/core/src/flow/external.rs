use std::path::PathBuf;
use std::process::Command;

use super::{flo, FlowBackend, FlowField};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::write_png;

/// Delegates flow estimation to an external program invoked as
///
/// ```text
/// <program> <reference.png> <moving.png> <output.flo>
/// ```
///
/// The program must write a Middlebury `.flo` file describing the flow from
/// the reference frame to the moving frame. Frames are exchanged as 8-bit
/// PNGs through a private temporary directory.
#[derive(Clone, Debug)]
pub struct ExternalFlow {
    program: PathBuf,
}

impl ExternalFlow {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ExternalFlow {
            program: program.into(),
        }
    }
}

impl FlowBackend for ExternalFlow {
    fn name(&self) -> &str {
        "external"
    }

    fn estimate(&self, reference: &Image, moving: &Image) -> Result<FlowField> {
        reference.ensure_same_shape(moving, "flow estimation")?;
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let ref_path = dir.path().join("reference.png");
        let mov_path = dir.path().join("moving.png");
        let out_path = dir.path().join("flow.flo");
        write_png(&ref_path, reference)?;
        write_png(&mov_path, moving)?;
        let status = Command::new(&self.program)
            .arg(&ref_path)
            .arg(&mov_path)
            .arg(&out_path)
            .status()
            .map_err(|e| Error::Flow(format!("cannot run {}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Flow(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }
        flo::read_flo(&out_path)
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    #[test]
    fn reads_flow_written_by_program() {
        let dir = tempfile::tempdir().unwrap();
        let canned = dir.path().join("canned.flo");
        flo::write_flo(&canned, &FlowField::constant(4, 6, 2.0, -1.0)).unwrap();
        let script = dir.path().join("flowtool.sh");
        std::fs::write(&script, format!("#!/bin/sh\ncp '{}' \"$3\"\n", canned.display())).unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();

        let backend = ExternalFlow::new(&script);
        let frame = Image::filled(4, 6, 3, 0.5);
        let flow = backend.estimate(&frame, &frame).unwrap();
        assert_eq!(flow, FlowField::constant(4, 6, 2.0, -1.0));
    }

    #[test]
    fn failing_program_is_an_error() {
        let backend = ExternalFlow::new("/bin/false");
        let frame = Image::filled(2, 2, 3, 0.5);
        assert!(matches!(backend.estimate(&frame, &frame), Err(Error::Flow(_))));
    }
}
