//! A minimal origin node: serves stored containers over the line-oriented
//! origin protocol (`SIZE`, `GET ... RANGE`). Used by integration tests and
//! available for standing up real origin fleets behind `bbm serve`.

use crate::ids::VideoId;
use crate::protocol::OriginRequest;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

#[derive(Default)]
pub struct OriginNode {
    videos: Mutex<BTreeMap<VideoId, Arc<Vec<u8>>>>,
}

impl OriginNode {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn put(&self, video: VideoId, container: Vec<u8>) {
        self.videos
            .lock()
            .unwrap()
            .insert(video, Arc::new(container));
    }

    pub fn remove(&self, video: &VideoId) {
        self.videos.lock().unwrap().remove(video);
    }

    fn get(&self, video: &VideoId) -> Option<Arc<Vec<u8>>> {
        self.videos.lock().unwrap().get(video).cloned()
    }

    /// Accept loop; one thread per connection. Runs until the listener
    /// errors (e.g. is dropped by the process shutting down).
    pub fn serve(self: &Arc<Self>, listener: TcpListener) {
        for stream in listener.incoming() {
            match stream {
                Ok(stream) => {
                    let node = self.clone();
                    std::thread::spawn(move || {
                        if let Err(e) = node.handle(stream) {
                            log::debug!("origin connection ended: {e}");
                        }
                    });
                }
                Err(e) => {
                    log::warn!("origin accept failed: {e}");
                    return;
                }
            }
        }
    }

    /// Spawns the accept loop on a background thread and returns the bound
    /// address.
    pub fn spawn(self: &Arc<Self>, listener: TcpListener) -> std::net::SocketAddr {
        let addr = listener.local_addr().expect("listener has local addr");
        let node = self.clone();
        std::thread::spawn(move || node.serve(listener));
        addr
    }

    fn handle(&self, stream: TcpStream) -> std::io::Result<()> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut out = stream;
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Ok(());
            }
            match OriginRequest::parse(&line) {
                Ok(OriginRequest::Size(video)) => match self.get(&video) {
                    Some(bytes) => writeln!(out, "200 {}", bytes.len())?,
                    None => writeln!(out, "404")?,
                },
                Ok(OriginRequest::Range { video, start, end }) => match self.get(&video) {
                    Some(bytes) => {
                        let total = bytes.len() as u64;
                        if start > end || end >= total {
                            writeln!(out, "416")?;
                        } else {
                            let chunk = &bytes[start as usize..=end as usize];
                            writeln!(out, "206 {}", chunk.len())?;
                            out.write_all(chunk)?;
                        }
                    }
                    None => writeln!(out, "404")?,
                },
                Err(e) => {
                    log::debug!("origin: rejecting request: {e}");
                    writeln!(out, "400")?;
                }
            }
            out.flush()?;
        }
    }
}
