//! CSV emission: per-request records and matrix summaries, fixed column
//! order, UTF-8, LF line endings.

use std::io::Write;

use anyhow::Result;
use dstage_core::job::JobClass;
use dstage_core::record::RequestRecord;

use crate::stats::SummaryRow;

pub const RECORD_HEADER: &str =
    "request_id,arrival_us,completion_us,rct_us,scheme,load,served_by,size_class,purges_issued";

pub const SUMMARY_HEADER: &str =
    "scheme,load,seed,n,mean_us,p50_us,p95_us,p99_us,p999_us,stable";

fn served_by(class: JobClass) -> &'static str {
    match class {
        JobClass::Primary => "primary",
        JobClass::Duplicate => "duplicate",
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[RequestRecord]) -> Result<()> {
    writeln!(w, "{RECORD_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.request_id,
            r.arrival_us,
            r.completion_us,
            r.rct_us,
            r.scheme,
            r.load,
            served_by(r.served_by),
            r.size_class.token(),
            r.purges_issued
        )?;
    }
    Ok(())
}

pub fn write_summary<W: Write>(mut w: W, rows: &[SummaryRow]) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for row in rows {
        let opt_f = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
        let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            row.scheme,
            row.load,
            row.seed,
            row.n,
            opt_f(row.mean_us),
            opt_u(row.p50_us),
            opt_u(row.p95_us),
            opt_u(row.p99_us),
            opt_u(row.p999_us),
            row.stable
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dstage_core::record::SizeClass;

    fn record() -> RequestRecord {
        RequestRecord {
            request_id: 3,
            arrival_us: 100,
            completion_us: 450,
            rct_us: 350,
            scheme: "das",
            load: 0.4,
            served_by: JobClass::Duplicate,
            size_class: SizeClass::Fixed,
            purges_issued: 1,
            group: 1,
        }
    }

    #[test]
    fn empty_records_emit_header_only() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{RECORD_HEADER}\n"));
    }

    #[test]
    fn one_record_round_trips() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[record()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains('\r'));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), 9);
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[header.iter().position(|h| *h == "request_id").unwrap()], "3");
        assert_eq!(fields[header.iter().position(|h| *h == "rct_us").unwrap()], "350");
        assert_eq!(fields[header.iter().position(|h| *h == "scheme").unwrap()], "das");
        assert_eq!(fields[header.iter().position(|h| *h == "served_by").unwrap()], "duplicate");
        assert_eq!(fields[header.iter().position(|h| *h == "size_class").unwrap()], "fixed");
    }

    #[test]
    fn summary_has_ten_columns_and_blanks_unstable_cells() {
        let rows = vec![
            SummaryRow {
                scheme: "das".into(),
                load: 0.4,
                seed: 1,
                n: 100,
                mean_us: Some(1234.5),
                p50_us: Some(1000),
                p95_us: Some(2000),
                p99_us: Some(3000),
                p999_us: Some(4000),
                stable: true,
            },
            SummaryRow {
                scheme: "cloning".into(),
                load: 0.7,
                seed: 1,
                n: 80,
                mean_us: None,
                p50_us: None,
                p95_us: None,
                p99_us: None,
                p999_us: None,
                stable: false,
            },
        ];
        let mut buf = Vec::new();
        write_summary(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in &lines {
            assert_eq!(line.split(',').count(), 10, "{line}");
        }
        assert_eq!(lines[1], "das,0.4,1,100,1234.5,1000,2000,3000,4000,true");
        assert_eq!(lines[2], "cloning,0.7,1,80,,,,,,false");
    }
}
