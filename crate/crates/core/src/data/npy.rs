//! Thin helpers over `.npy` files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use npyz::{AutoSerialize, Deserialize, DType, WriterBuilder};

use crate::error::{Error, Result};

pub fn write_npy<T: AutoSerialize + Copy>(path: &Path, shape: &[usize], data: &[T]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let shape: Vec<u64> = shape.iter().map(|&s| s as u64).collect();
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(io)?;
    w.extend(data.iter().copied()).map_err(io)?;
    w.finish().map_err(io)
}

fn open(path: &Path) -> Result<npyz::NpyFile<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    npyz::NpyFile::new(BufReader::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_npy<T: Deserialize>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let npy = open(path)?;
    let shape = npy.shape().iter().map(|&s| s as usize).collect();
    let data = npy.into_vec::<T>().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((shape, data))
}

/// Reads any real or integer array as `f32`.
pub fn read_npy_as_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let npy = open(path)?;
    let shape: Vec<usize> = npy.shape().iter().map(|&s| s as usize).collect();
    let DType::Plain(ty) = npy.dtype() else {
        return Err(Error::Format(format!("{}: structured arrays are not supported", path.display())));
    };
    let fmt = |e: std::io::Error| Error::Format(format!("{}: {e}", path.display()));
    let data: Vec<f32> = match (ty.type_char(), ty.size_field()) {
        (npyz::TypeChar::Float, 4) => npy.into_vec::<f32>().map_err(fmt)?,
        (npyz::TypeChar::Float, 8) => npy.into_vec::<f64>().map_err(fmt)?.into_iter().map(|v| v as f32).collect(),
        (npyz::TypeChar::Int, 2) => npy.into_vec::<i16>().map_err(fmt)?.into_iter().map(f32::from).collect(),
        (npyz::TypeChar::Int, 4) => npy.into_vec::<i32>().map_err(fmt)?.into_iter().map(|v| v as f32).collect(),
        (npyz::TypeChar::Uint, 1) => npy.into_vec::<u8>().map_err(fmt)?.into_iter().map(f32::from).collect(),
        other => return Err(Error::Format(format!("{}: unsupported dtype {other:?}", path.display()))),
    };
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_widen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        write_npy(&p, &[2, 3], &[1i16, -2, 3, 4, 5, 6]).unwrap();
        let (shape, data) = read_npy_as_f32(&p).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(data, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]);
        let q = dir.path().join("b.npy");
        write_npy(&q, &[2], &[0.5f32, 1.0]).unwrap();
        assert_eq!(read_npy::<f32>(&q).unwrap().1, vec![0.5, 1.0]);
    }
}
