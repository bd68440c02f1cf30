//! SVG 1.1 export and import of stroke sketches.
//!
//! Each stroke becomes one `<path d="M x y C x y x y x y">` with round caps
//! and joins and no fill, drawn over a white background rectangle. Numbers
//! are written with four decimals. Colors are written as `#rrggbb`, so they
//! round-trip at 8-bit precision.

use std::fmt::Write as _;

use svgtypes::{Color, PathParser, PathSegment};

use crate::error::{Error, Result};
use crate::geometry::{logit, ControlPoint, SketchParams, Stroke, DEFAULT_STROKE_WIDTH};

/// Decimal places used for every number in exported documents.
pub const PRECISION: usize = 4;

/// Opacities are clamped to `[OPACITY_EPS, 1 - OPACITY_EPS]` on import so
/// the logit stays finite.
pub const OPACITY_EPS: f64 = 1e-6;

fn num(v: f64) -> String {
    let s = format!("{v:.PRECISION$}");
    // avoid "-0.0000"
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        format!("{:.PRECISION$}", 0.0)
    } else {
        s
    }
}

fn hex(color: [f64; 3]) -> String {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(color[0]), c(color[1]), c(color[2]))
}

pub fn path_data(s: &Stroke) -> String {
    let p = &s.points;
    format!(
        "M {} {} C {} {} {} {} {} {}",
        num(p[0].x),
        num(p[0].y),
        num(p[1].x),
        num(p[1].y),
        num(p[2].x),
        num(p[2].y),
        num(p[3].x),
        num(p[3].y)
    )
}

pub fn export_svg(params: &SketchParams) -> String {
    let (w, h) = (params.canvas_w, params.canvas_h);
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(out, "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>");
    for s in &params.strokes {
        let _ = writeln!(
            out,
            "  <path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" stroke-opacity=\"{}\" stroke-linecap=\"round\" stroke-linejoin=\"round\"/>",
            path_data(s),
            hex(s.color),
            num(s.width),
            num(s.opacity())
        );
    }
    out.push_str("</svg>\n");
    out
}

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::SvgParse {
        offset,
        message: message.into(),
    }
}

fn byte_offset(text: &str, row: u32, col: u32) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(row.saturating_sub(1) as usize).map(str::len).sum();
    let line = text[line_start..].lines().next().unwrap_or("");
    line_start + line.chars().take(col.saturating_sub(1) as usize).map(char::len_utf8).sum::<usize>()
}

fn svgtypes_pos(e: &svgtypes::Error) -> usize {
    use svgtypes::Error as E;
    match e {
        E::UnexpectedData(p) | E::InvalidChar(_, p) | E::InvalidString(_, p) | E::InvalidNumber(p) => *p,
        _ => 0,
    }
}

/// A length attribute such as `512` or `512px`.
fn length(node: roxmltree::Node<'_, '_>, name: &str) -> Result<Option<f64>> {
    let Some(attr) = node.attribute_node(name) else {
        return Ok(None);
    };
    let raw = attr.value().trim().trim_end_matches("px");
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| parse_error(attr.range_value().start, format!("invalid {name} {:?}", attr.value())))
}

fn number_attr(node: roxmltree::Node<'_, '_>, name: &str, default: f64) -> Result<f64> {
    Ok(length(node, name)?.unwrap_or(default))
}

fn canvas_size(root: roxmltree::Node<'_, '_>) -> Result<(usize, usize)> {
    let (mut w, mut h) = (length(root, "width")?, length(root, "height")?);
    if let (None, None) = (w, h) {
        if let Some(vb) = root.attribute_node("viewBox") {
            let v: Vec<f64> = vb
                .value()
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_error(vb.range_value().start, "invalid viewBox"))?;
            if v.len() != 4 {
                return Err(parse_error(vb.range_value().start, "viewBox needs four numbers"));
            }
            w = Some(v[2]);
            h = Some(v[3]);
        }
    }
    let at = root.range().start;
    let (w, h) = (w.unwrap_or(0.0), h.unwrap_or(0.0));
    if !(w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0) {
        return Err(parse_error(at, format!("canvas size {w}x{h} must be positive integers")));
    }
    Ok((w as usize, h as usize))
}

fn parse_stroke(node: roxmltree::Node<'_, '_>) -> Result<Stroke> {
    let d = node
        .attribute_node("d")
        .ok_or_else(|| parse_error(node.range().start, "path without d attribute"))?;
    let base = d.range_value().start;
    let mut segments = Vec::new();
    for seg in PathParser::from(d.value()) {
        segments.push(seg.map_err(|e| parse_error(base + svgtypes_pos(&e), format!("path data: {e}")))?);
    }
    let pts = match segments.as_slice() {
        [PathSegment::MoveTo { x, y, .. }, PathSegment::CurveTo {
            abs,
            x1,
            y1,
            x2,
            y2,
            x: x3,
            y: y3,
        }] => {
            let (ox, oy) = if *abs { (0.0, 0.0) } else { (*x, *y) };
            [
                ControlPoint::new(*x, *y),
                ControlPoint::new(ox + x1, oy + y1),
                ControlPoint::new(ox + x2, oy + y2),
                ControlPoint::new(ox + x3, oy + y3),
            ]
        }
        _ => return Err(parse_error(base, "expected exactly \"M x y C x1 y1 x2 y2 x y\"")),
    };

    let width = number_attr(node, "stroke-width", DEFAULT_STROKE_WIDTH)?;
    if !(width > 0.0 && width.is_finite()) {
        return Err(parse_error(node.range().start, format!("stroke-width {width} must be positive")));
    }
    let opacity = number_attr(node, "stroke-opacity", 1.0)? * number_attr(node, "opacity", 1.0)?;
    let color = match node.attribute_node("stroke") {
        None => [0.0; 3],
        Some(a) => {
            let c: Color = a
                .value()
                .parse()
                .map_err(|e| parse_error(a.range_value().start, format!("stroke color: {e}")))?;
            [c.red, c.green, c.blue].map(|v| v as f64 / 255.0)
        }
    };
    let opacity = opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    Ok(Stroke::new(pts, logit(opacity)).with_width(width).with_color(color))
}

/// Parses a document written by [`export_svg`] (or any SVG whose paths are
/// single cubic segments). Relative path commands are accepted.
pub fn import_svg(text: &str) -> Result<SketchParams> {
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let p = e.pos();
        parse_error(byte_offset(text, p.row, p.col), e.to_string())
    })?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(parse_error(root.range().start, "root element is not <svg>"));
    }
    let (w, h) = canvas_size(root)?;
    let strokes = root
        .descendants()
        .filter(|n| n.is_element() && n.tag_name().name() == "path")
        .map(parse_stroke)
        .collect::<Result<Vec<_>>>()?;
    SketchParams::new(strokes, w, h)
}
