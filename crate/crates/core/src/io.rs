//! Matrix files: headerless CSV, single-matrix binary `KMX1` and stacked
//! binary `KST1`.
//!
//! Binary layouts (little endian):
//! `KMX1 | rows:u32 | cols:u32 | rows*cols f64 row-major` and
//! `KST1 | n:u32 | rows:u32 | cols:u32 | n matrices, each row-major`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::{NormalEquations, CHUNK_ROWS};
use crate::tensor::Mat;

pub const KMX_MAGIC: [u8; 4] = *b"KMX1";
pub const KST_MAGIC: [u8; 4] = *b"KST1";

/// Decimal rendering with 17 significant digits; parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    let t = s.trim();
    t.parse::<f64>().map_err(|_| Error::Parse(format!("not a number: '{t}'")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Kmx,
    Kst,
}

impl MatrixFormat {
    /// `.kmx` and `.kst` select the binary layouts; anything else is CSV.
    pub fn from_extension(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "kmx" => MatrixFormat::Kmx,
            Some(e) if e == "kst" => MatrixFormat::Kst,
            _ => MatrixFormat::Csv,
        }
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        Error::Dimension(m) => Error::Dimension(format!("{}: {m}", path.display())),
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Sniff the first four bytes.
pub fn detect_format(path: &Path) -> Result<MatrixFormat> {
    let mut f = with_path(path, File::open(path).map_err(Error::from))?;
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let k = f.read(&mut magic[got..])?;
        if k == 0 {
            break;
        }
        got += k;
    }
    Ok(match (got, magic) {
        (4, KMX_MAGIC) => MatrixFormat::Kmx,
        (4, KST_MAGIC) => MatrixFormat::Kst,
        _ => MatrixFormat::Csv,
    })
}

pub fn parse_csv(text: &str) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(parse_f64)
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn format_csv(m: &Mat) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Parse("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_body(r: &mut impl Read, rows: usize, cols: usize) -> Result<Mat> {
    let mut buf = vec![0u8; cols * 8];
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Parse(format!("truncated data in row {i} of {rows}")))?;
        for j in 0..cols {
            m[(i, j)] = f64::from_le_bytes(buf[j * 8..j * 8 + 8].try_into().expect("8 bytes"));
        }
    }
    Ok(m)
}

fn expect_magic(r: &mut impl Read, magic: [u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Parse("file too short for magic".into()))?;
    if b != magic {
        return Err(Error::Parse(format!(
            "bad magic {:?}, expected {}",
            b,
            String::from_utf8_lossy(&magic)
        )));
    }
    Ok(())
}

fn ensure_at_end(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Parse("trailing bytes after matrix data".into())),
    }
}

pub fn read_kmx_from(r: &mut impl Read) -> Result<Mat> {
    expect_magic(r, KMX_MAGIC)?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let m = read_body(r, rows, cols)?;
    ensure_at_end(r)?;
    Ok(m)
}

fn write_body(w: &mut impl Write, m: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(m.ncols() * 8);
    for i in 0..m.nrows() {
        buf.clear();
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn dim_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::dim(format!("{what} = {x} does not fit the 32-bit header")))
}

pub fn write_kmx_to(w: &mut impl Write, m: &Mat) -> Result<()> {
    w.write_all(&KMX_MAGIC)?;
    w.write_all(&dim_u32(m.nrows(), "rows")?.to_le_bytes())?;
    w.write_all(&dim_u32(m.ncols(), "cols")?.to_le_bytes())?;
    write_body(w, m)
}

pub fn read_kst_from(r: &mut impl Read) -> Result<Vec<Mat>> {
    expect_magic(r, KST_MAGIC)?;
    let n = read_u32(r)? as usize;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let out = (0..n).map(|_| read_body(r, rows, cols)).collect::<Result<Vec<_>>>()?;
    ensure_at_end(r)?;
    Ok(out)
}

pub fn write_kst_to(w: &mut impl Write, mats: &[Mat]) -> Result<()> {
    let (rows, cols) = mats.first().map(|m| m.shape()).unwrap_or((0, 0));
    if let Some(i) = mats.iter().position(|m| m.shape() != (rows, cols)) {
        return Err(Error::dim(format!("stack entry {i} is not {rows}x{cols}")));
    }
    w.write_all(&KST_MAGIC)?;
    w.write_all(&dim_u32(mats.len(), "n")?.to_le_bytes())?;
    w.write_all(&dim_u32(rows, "rows")?.to_le_bytes())?;
    w.write_all(&dim_u32(cols, "cols")?.to_le_bytes())?;
    for m in mats {
        write_body(w, m)?;
    }
    Ok(())
}

/// Read a single matrix, detecting `KMX1` by its magic and CSV otherwise.
pub fn read_matrix(path: &Path) -> Result<Mat> {
    let r = match detect_format(path)? {
        MatrixFormat::Kmx => {
            let mut f = BufReader::new(File::open(path)?);
            read_kmx_from(&mut f)
        }
        MatrixFormat::Kst => Err(Error::Parse("is a KST1 stack, expected a single matrix".into())),
        MatrixFormat::Csv => parse_csv(&std::fs::read_to_string(path)?),
    };
    with_path(path, r)
}

/// Write a matrix; the format follows the file extension.
pub fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    let r = (|| {
        let mut w = BufWriter::new(File::create(path)?);
        match MatrixFormat::from_extension(path) {
            MatrixFormat::Kmx => write_kmx_to(&mut w, m)?,
            MatrixFormat::Kst => write_kst_to(&mut w, std::slice::from_ref(m))?,
            MatrixFormat::Csv => w.write_all(format_csv(m).as_bytes())?,
        }
        w.flush()?;
        Ok(())
    })();
    with_path(path, r)
}

pub fn read_stack(path: &Path) -> Result<Vec<Mat>> {
    let r = (|| {
        let mut f = BufReader::new(File::open(path)?);
        read_kst_from(&mut f)
    })();
    with_path(path, r)
}

pub fn write_stack(path: &Path, mats: &[Mat]) -> Result<()> {
    let r = (|| {
        let mut w = BufWriter::new(File::create(path)?);
        write_kst_to(&mut w, mats)?;
        w.flush()?;
        Ok(())
    })();
    with_path(path, r)
}

/// Incremental `KMX1` writer for matrices produced a few rows at a time.
pub struct KmxWriter {
    w: BufWriter<File>,
    path: PathBuf,
    rows: usize,
    cols: usize,
    written: usize,
}

impl KmxWriter {
    pub fn create(path: &Path, rows: usize, cols: usize) -> Result<Self> {
        let r = (|| {
            let mut w = BufWriter::new(File::create(path)?);
            w.write_all(&KMX_MAGIC)?;
            w.write_all(&dim_u32(rows, "rows")?.to_le_bytes())?;
            w.write_all(&dim_u32(cols, "cols")?.to_le_bytes())?;
            Ok(w)
        })();
        Ok(KmxWriter { w: with_path(path, r)?, path: path.to_path_buf(), rows, cols, written: 0 })
    }

    pub fn write_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::dim(format!("row has {} entries, expected {}", row.len(), self.cols)));
        }
        if self.written == self.rows {
            return Err(Error::dim(format!("{}: all {} rows already written", self.path.display(), self.rows)));
        }
        for x in row {
            self.w.write_all(&x.to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    /// Write the columns of `mt` (`cols x c`) as `c` rows.
    pub fn write_transposed(&mut self, mt: &Mat) -> Result<()> {
        for col in mt.column_iter() {
            self.write_row(col.as_slice())?;
        }
        Ok(())
    }

    pub fn write_rows(&mut self, m: &Mat) -> Result<()> {
        let t = m.transpose();
        self.write_transposed(&t)
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.rows {
            return Err(Error::dim(format!(
                "{}: wrote {} of {} rows",
                self.path.display(),
                self.written,
                self.rows
            )));
        }
        self.w.flush()?;
        Ok(())
    }
}

/// Sequential reader over the rows of a `KMX1` file.
pub struct KmxRowReader {
    r: BufReader<File>,
    rows: usize,
    cols: usize,
    read: usize,
}

impl KmxRowReader {
    pub fn open(path: &Path) -> Result<Self> {
        let r = (|| {
            let mut r = BufReader::new(File::open(path)?);
            expect_magic(&mut r, KMX_MAGIC)?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            Ok(KmxRowReader { r, rows, cols, read: 0 })
        })();
        with_path(path, r)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Up to `k` further rows as the columns of a `cols x c` matrix.
    pub fn next_transposed(&mut self, k: usize) -> Result<Option<Mat>> {
        let c = k.min(self.rows - self.read);
        if c == 0 {
            return Ok(None);
        }
        let body = read_body(&mut self.r, c, self.cols)?;
        self.read += c;
        Ok(Some(body.transpose()))
    }
}

/// OLS normal equations from a design file (`n x q`) and a response file
/// (`n x p`), read [`CHUNK_ROWS`] rows at a time. Both may be CSV or KMX;
/// only KMX files are streamed.
pub fn normal_equations_from_files(x_path: &Path, y_path: &Path) -> Result<NormalEquations> {
    let both_kmx = detect_format(x_path)? == MatrixFormat::Kmx && detect_format(y_path)? == MatrixFormat::Kmx;
    if !both_kmx {
        let x = read_matrix(x_path)?;
        let y = read_matrix(y_path)?;
        let mut ne = NormalEquations::new(x.ncols(), y.ncols());
        ne.add_rows(&x, &y)?;
        return Ok(ne);
    }
    let mut xr = KmxRowReader::open(x_path)?;
    let mut yr = KmxRowReader::open(y_path)?;
    let ((nx, q), (ny, p)) = (xr.shape(), yr.shape());
    if nx != ny {
        return Err(Error::dim(format!(
            "{} has {nx} rows but {} has {ny}",
            x_path.display(),
            y_path.display()
        )));
    }
    let mut ne = NormalEquations::new(q, p);
    while let Some(xt) = with_path(x_path, xr.next_transposed(CHUNK_ROWS))? {
        let yt = with_path(y_path, yr.next_transposed(CHUNK_ROWS))?.expect("row counts checked");
        ne.add_chunk(&xt.transpose(), &yt)?;
    }
    Ok(ne)
}

/// Lines of a CSV file with the header removed, for reading back reports.
pub fn read_csv_records(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines().skip(1) {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line.split(',').map(|s| s.trim().to_string()).collect());
        }
    }
    Ok(out)
}
