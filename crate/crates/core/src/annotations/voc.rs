//! PASCAL-VOC-style XML, one file per table image.

use quick_xml::events::Event;
use quick_xml::Reader;

use super::{round_half_up, BBox, TableAnnotation};
use crate::error::{Error, Result};

pub const ROW_LABEL: &str = "table row";
pub const COLUMN_LABEL: &str = "table column";

/// Result of [`parse_voc_xml`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocParse {
    pub annotation: TableAnnotation,
    /// Objects whose name was neither a row nor a column label.
    pub ignored_objects: usize,
}

#[derive(Default)]
struct PendingObject {
    name: Option<String>,
    coords: [Option<f64>; 4],
}

fn parse_coord(text: &str, offset: u64) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| Error::XmlParse {
        offset,
        message: format!("expected a number, found {text:?}"),
    })
}

fn to_pixel(v: f64, field: &str) -> Result<u32> {
    let r = round_half_up(v);
    if !(0..=u32::MAX as i64).contains(&r) {
        return Err(Error::Annotation(format!("{field} = {v} is outside the image")));
    }
    Ok(r as u32)
}

/// Parses one annotation document.
///
/// Coordinates may be fractional; they are rounded half-up to pixels.
pub fn parse_voc_xml(document: &[u8]) -> Result<VocParse> {
    let mut reader = Reader::from_reader(document);
    reader.config_mut().trim_text(true);
    let mut path: Vec<String> = Vec::new();
    let (mut width, mut height) = (None, None);
    let mut rows = Vec::new();
    let mut columns = Vec::new();
    let mut ignored = 0;
    let mut pending: Option<PendingObject> = None;

    loop {
        let offset = reader.buffer_position();
        let event = reader.read_event().map_err(|e| Error::XmlParse {
            offset: reader.error_position(),
            message: e.to_string(),
        })?;
        match event {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if path.is_empty() && name != "annotation" {
                    return Err(Error::XmlParse {
                        offset,
                        message: format!("root element must be <annotation>, found <{name}>"),
                    });
                }
                if path.len() == 1 && name == "object" {
                    pending = Some(PendingObject::default());
                }
                path.push(name);
            }
            Event::End(_) => {
                let closed = path.pop();
                if path.len() == 1 && closed.as_deref() == Some("object") {
                    let obj = pending.take().unwrap_or_default();
                    let name = obj.name.unwrap_or_default();
                    let is_row = name == ROW_LABEL;
                    if !is_row && name != COLUMN_LABEL {
                        ignored += 1;
                        continue;
                    }
                    let [xmin, ymin, xmax, ymax] = obj.coords;
                    let (Some(xmin), Some(ymin), Some(xmax), Some(ymax)) = (xmin, ymin, xmax, ymax) else {
                        return Err(Error::Annotation(format!("object {name:?} lacks a complete bndbox")));
                    };
                    let b = BBox::new(
                        to_pixel(xmin, "xmin")?,
                        to_pixel(ymin, "ymin")?,
                        to_pixel(xmax, "xmax")?,
                        to_pixel(ymax, "ymax")?,
                    );
                    if is_row {
                        rows.push(b);
                    } else {
                        columns.push(b);
                    }
                }
            }
            Event::Text(t) => {
                let text = t.unescape().map_err(|e| Error::XmlParse {
                    offset,
                    message: e.to_string(),
                })?;
                let p: Vec<&str> = path.iter().map(String::as_str).collect();
                match p.as_slice() {
                    ["annotation", "size", "width"] => width = Some(parse_coord(&text, offset)?),
                    ["annotation", "size", "height"] => height = Some(parse_coord(&text, offset)?),
                    ["annotation", "object", "name"] => {
                        if let Some(o) = pending.as_mut() {
                            o.name = Some(text.trim().to_owned());
                        }
                    }
                    ["annotation", "object", "bndbox", field] => {
                        let slot = match *field {
                            "xmin" => 0,
                            "ymin" => 1,
                            "xmax" => 2,
                            "ymax" => 3,
                            _ => continue,
                        };
                        if let Some(o) = pending.as_mut() {
                            o.coords[slot] = Some(parse_coord(&text, offset)?);
                        }
                    }
                    _ => {}
                }
            }
            Event::Eof => {
                if !path.is_empty() {
                    return Err(Error::XmlParse {
                        offset,
                        message: format!("unexpected end of document inside <{}>", path.join("/")),
                    });
                }
                break;
            }
            _ => {}
        }
    }

    let (Some(width), Some(height)) = (width, height) else {
        return Err(Error::Annotation("missing size/width or size/height".into()));
    };
    let annotation = TableAnnotation::new(to_pixel(width, "width")?, to_pixel(height, "height")?, rows, columns)?;
    if ignored > 0 {
        log::warn!("ignored {ignored} objects with unknown names");
    }
    Ok(VocParse {
        annotation,
        ignored_objects: ignored,
    })
}

/// Serializes an annotation in the schema [`parse_voc_xml`] reads.
pub fn write_voc_xml(annotation: &TableAnnotation, filename: &str) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    s.push_str("<annotation>\n");
    let _ = writeln!(s, "  <filename>{}</filename>", quick_xml::escape::escape(filename));
    let _ = writeln!(
        s,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>",
        annotation.width, annotation.height
    );
    let objects = annotation
        .rows
        .iter()
        .map(|b| (ROW_LABEL, b))
        .chain(annotation.columns.iter().map(|b| (COLUMN_LABEL, b)));
    for (label, b) in objects {
        let _ = writeln!(
            s,
            "  <object>\n    <name>{label}</name>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>",
            b.xmin, b.ymin, b.xmax, b.ymax
        );
    }
    s.push_str("</annotation>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"<?xml version="1.0"?>
<annotation>
  <folder>tables</folder>
  <filename>fixture.jpg</filename>
  <size><width>100</width><height>100</height><depth>3</depth></size>
  <object>
    <name>table row</name>
    <bndbox><xmin>0</xmin><ymin>10</ymin><xmax>100</xmax><ymax>20</ymax></bndbox>
  </object>
  <object>
    <name>table column</name>
    <pose>Frontal</pose>
    <bndbox><xmin>30.0</xmin><ymin>0</ymin><xmax>40</xmax><ymax>100</ymax></bndbox>
  </object>
  <object>
    <name>table spanning cell</name>
    <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>2</xmax><ymax>2</ymax></bndbox>
  </object>
</annotation>"#;

    #[test]
    fn parses_fixture() {
        let p = parse_voc_xml(FIXTURE.as_bytes()).unwrap();
        assert_eq!(p.annotation.rows, vec![BBox::new(0, 10, 100, 20)]);
        assert_eq!(p.annotation.columns, vec![BBox::new(30, 0, 40, 100)]);
        assert_eq!((p.annotation.width, p.annotation.height), (100, 100));
        assert_eq!(p.ignored_objects, 1);
    }

    #[test]
    fn no_objects_is_valid() {
        let doc = "<annotation><size><width>8</width><height>4</height></size></annotation>";
        let p = parse_voc_xml(doc.as_bytes()).unwrap();
        assert!(p.annotation.is_empty());
    }

    #[test]
    fn inverted_box_is_rejected() {
        let doc = "<annotation><size><width>80</width><height>40</height></size>\
            <object><name>table row</name><bndbox><xmin>50</xmin><ymin>1</ymin><xmax>10</xmax><ymax>5</ymax></bndbox></object>\
            </annotation>";
        let err = parse_voc_xml(doc.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Annotation(ref m) if m.contains("(50, 1, 10, 5)")), "{err}");
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let doc = "<annotation><size><width>80</width><height>40</height></size>\
            <object><name>table column</name><bndbox><xmin>10</xmin><ymin>0</ymin><xmax>12</xmax><ymax>41</ymax></bndbox></object>\
            </annotation>";
        assert!(parse_voc_xml(doc.as_bytes()).is_err());
    }

    #[test]
    fn missing_size_is_rejected() {
        let doc = "<annotation><object><name>table row</name></object></annotation>";
        assert!(matches!(parse_voc_xml(doc.as_bytes()), Err(Error::Annotation(_))));
    }

    #[test]
    fn malformed_xml_reports_offset() {
        let doc = "<annotation><size><width>8</width></height></size></annotation>";
        match parse_voc_xml(doc.as_bytes()) {
            Err(Error::XmlParse { offset, .. }) => assert!(offset > 0 && offset < doc.len() as u64),
            other => panic!("expected xml error, got {other:?}"),
        }
        let truncated = "<annotation><size><width>8</width>";
        assert!(matches!(parse_voc_xml(truncated.as_bytes()), Err(Error::XmlParse { .. })));
    }

    #[test]
    fn writer_roundtrips() {
        let a = parse_voc_xml(FIXTURE.as_bytes()).unwrap().annotation;
        let xml = write_voc_xml(&a, "a&b.png");
        let back = parse_voc_xml(xml.as_bytes()).unwrap();
        assert_eq!(back.annotation, a);
        assert_eq!(back.ignored_objects, 0);
    }
}
