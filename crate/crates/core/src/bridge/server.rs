use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use super::{decode_query, encode_error, encode_response, parse_response_line, ProbeQuery, ProbeResponse};

/// Anything that can answer top-k queries.
pub trait Predictor: Send + Sync {
    fn predict(&self, query: &ProbeQuery) -> Result<ProbeResponse, String>;
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn predict(&self, query: &ProbeQuery) -> Result<ProbeResponse, String> {
        (**self).predict(query)
    }
}

/// Answers queries line by line until the reader is exhausted. A bad query
/// gets an error line; the loop keeps going. Returns the number of lines
/// handled.
pub fn serve_stream<P, R, W>(predictor: &P, reader: R, mut writer: W) -> std::io::Result<usize>
where
    P: Predictor + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut handled = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        handled += 1;
        let reply = match decode_query(&line) {
            Ok(query) => match predictor.predict(&query) {
                Ok(response) => encode_response(&response),
                Err(message) => encode_error(Some(&query.id), &message),
            },
            Err(err) => {
                let id = parse_response_line(&line).id;
                encode_error(id.as_deref(), &err.to_string())
            }
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(handled)
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(listener: TcpListener, predictor: Arc<dyn Predictor>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let predictor = Arc::clone(&predictor);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let result = stream
                .try_clone()
                .and_then(|read_half| serve_stream(&*predictor, BufReader::new(read_half), BufWriter::new(stream)));
            if let Err(e) = result {
                log::warn!("connection {peer:?}: {e}");
            }
        });
    }
    Ok(())
}
