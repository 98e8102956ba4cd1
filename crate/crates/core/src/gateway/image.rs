use std::borrow::Cow;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Where the image bytes come from. Exactly one form is ever populated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Path(PathBuf),
    Url(String),
    /// Base64 payload without the `data:` prefix.
    Inline(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub source: ImageSource,
    pub media_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl ImageRef {
    /// Interprets an input-file image string: `data:<mime>;base64,<payload>`,
    /// an `http(s)://` URL, or otherwise a filesystem path.
    pub fn parse(raw: &str) -> ImageRef {
        let raw = raw.trim();
        if let Some(rest) = raw.strip_prefix("data:") {
            if let Some((meta, payload)) = rest.split_once(',') {
                let media_type = meta.strip_suffix(";base64").unwrap_or(meta);
                return ImageRef {
                    source: ImageSource::Inline(payload.to_string()),
                    media_type: if media_type.is_empty() {
                        "application/octet-stream".to_string()
                    } else {
                        media_type.to_string()
                    },
                    width: None,
                    height: None,
                };
            }
        }
        if raw.starts_with("http://") || raw.starts_with("https://") {
            return ImageRef {
                media_type: media_type_for(raw).to_string(),
                source: ImageSource::Url(raw.to_string()),
                width: None,
                height: None,
            };
        }
        ImageRef::path(raw)
    }

    pub fn path(path: impl AsRef<Path>) -> ImageRef {
        let path = path.as_ref();
        ImageRef {
            media_type: media_type_for(&path.to_string_lossy()).to_string(),
            source: ImageSource::Path(path.to_path_buf()),
            width: None,
            height: None,
        }
    }

    pub fn inline(bytes: &[u8], media_type: impl Into<String>) -> ImageRef {
        ImageRef {
            source: ImageSource::Inline(STANDARD.encode(bytes)),
            media_type: media_type.into(),
            width: None,
            height: None,
        }
    }

    /// Stable identity string: the path, the URL, or the base64 payload.
    pub fn identity(&self) -> Cow<'_, str> {
        match &self.source {
            ImageSource::Path(p) => p.to_string_lossy(),
            ImageSource::Url(u) => Cow::Borrowed(u.as_str()),
            ImageSource::Inline(b) => Cow::Borrowed(b.as_str()),
        }
    }

    /// Decodes an inline payload and checks that it carries a known image format.
    pub fn decode_inline(&self) -> Result<Option<Vec<u8>>, GatewayError> {
        match &self.source {
            ImageSource::Inline(b64) => {
                let bytes = STANDARD
                    .decode(b64.trim())
                    .map_err(|e| GatewayError::ImageDecode(format!("invalid base64: {e}")))?;
                sniff(&bytes)?;
                Ok(Some(bytes))
            }
            _ => Ok(None),
        }
    }

    /// Loads the image bytes (path or inline) and returns them with the detected media type.
    pub async fn load_bytes(&self) -> Result<(Vec<u8>, String), GatewayError> {
        let bytes = match &self.source {
            ImageSource::Path(p) => tokio::fs::read(p)
                .await
                .map_err(|e| GatewayError::ImageDecode(format!("{}: {e}", p.display())))?,
            ImageSource::Inline(_) => self.decode_inline()?.unwrap_or_default(),
            ImageSource::Url(u) => {
                return Err(GatewayError::ImageDecode(format!(
                    "{u} is a remote image; fetch it before loading bytes"
                )))
            }
        };
        let format = sniff(&bytes)?;
        Ok((bytes, format.to_mime_type().to_string()))
    }

    /// URL the model should receive: remote URLs pass through, local images become base64 data URLs.
    pub async fn to_wire_url(&self) -> Result<String, GatewayError> {
        if let ImageSource::Url(u) = &self.source {
            return Ok(u.clone());
        }
        let (bytes, mime) = self.load_bytes().await?;
        Ok(format!("data:{mime};base64,{}", STANDARD.encode(bytes)))
    }

    /// Width and height from the file header, without decoding pixel data.
    pub fn probe_dimensions(&self) -> Result<(u32, u32), GatewayError> {
        if let (Some(w), Some(h)) = (self.width, self.height) {
            return Ok((w, h));
        }
        let reader = match &self.source {
            ImageSource::Path(p) => {
                let bytes = std::fs::read(p).map_err(|e| GatewayError::ImageDecode(format!("{}: {e}", p.display())))?;
                image::ImageReader::new(Cursor::new(bytes))
            }
            ImageSource::Inline(_) => image::ImageReader::new(Cursor::new(self.decode_inline()?.unwrap_or_default())),
            ImageSource::Url(u) => return Err(GatewayError::ImageDecode(format!("cannot probe remote image {u}"))),
        };
        reader
            .with_guessed_format()
            .map_err(|e| GatewayError::ImageDecode(e.to_string()))?
            .into_dimensions()
            .map_err(|e| GatewayError::ImageDecode(e.to_string()))
    }
}

fn sniff(bytes: &[u8]) -> Result<image::ImageFormat, GatewayError> {
    image::guess_format(bytes).map_err(|_| GatewayError::ImageDecode("unrecognized image format".into()))
}

fn media_type_for(name: &str) -> &'static str {
    let lower = name.to_ascii_lowercase();
    let ext = lower.rsplit('.').next().unwrap_or("");
    match ext {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "gif" => "image/gif",
        "bmp" => "image/bmp",
        _ => "application/octet-stream",
    }
}
