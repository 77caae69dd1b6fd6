//! Blocking HTTP client for the service.

use std::time::Duration;

use reqwest::blocking::{Client as Http, Response};
use reqwest::Url;
use serde::de::DeserializeOwned;
use serde::Serialize;

use rollguard_core::monitor::{PruneRequest, RollbackRequest, SnapshotRequest, UpdateRequest};
use rollguard_core::records::ObjectId;

use crate::api::{
    ApiError, CheckpointResponse, EligibilityQuery, EligibilityResponse, Envelope, ErrorBody, LineageResponse,
    SnapshotsResponse, TxResponse, VerifyResponse,
};
use crate::backend::{ApiResult, Backend};

#[derive(Debug, Clone)]
pub struct Client {
    base: Url,
    http: Http,
}

fn transport(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(0, "transport", e.to_string())
}

impl Client {
    pub fn new(base: &str) -> ApiResult<Self> {
        let base = Url::parse(base).map_err(transport)?;
        let http = Http::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(transport)?;
        Ok(Self { base, http })
    }

    fn url(&self, path: &str) -> ApiResult<Url> {
        self.base.join(path).map_err(transport)
    }

    fn decode<T: DeserializeOwned>(resp: Response) -> ApiResult<T> {
        let status = resp.status();
        let bytes = resp.bytes().map_err(transport)?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(transport);
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(ApiError {
                status: status.as_u16(),
                body,
            }),
            Err(_) => Err(ApiError::new(
                status.as_u16(),
                "internal",
                String::from_utf8_lossy(&bytes).into_owned(),
            )),
        }
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: B) -> ApiResult<T> {
        let resp = self
            .http
            .post(self.url(path)?)
            .json(&Envelope::new(body))
            .send()
            .map_err(transport)?;
        Self::decode(resp)
    }

    fn get<T: DeserializeOwned>(&self, url: Url) -> ApiResult<T> {
        Self::decode(self.http.get(url).send().map_err(transport)?)
    }
}

impl Backend for Client {
    fn update(&self, req: UpdateRequest) -> ApiResult<TxResponse> {
        self.post("/v1/state_update", req)
    }

    fn snapshot(&self, req: SnapshotRequest) -> ApiResult<TxResponse> {
        self.post("/v1/take_snapshot", req)
    }

    fn rollback(&self, req: RollbackRequest) -> ApiResult<TxResponse> {
        self.post("/v1/rollback", req)
    }

    fn prune(&self, req: PruneRequest) -> ApiResult<TxResponse> {
        self.post("/v1/prune", req)
    }

    fn checkpoint(&self) -> ApiResult<CheckpointResponse> {
        self.get(self.url("/v1/checkpoint")?)
    }

    fn snapshots(&self) -> ApiResult<SnapshotsResponse> {
        self.get(self.url("/v1/snapshots")?)
    }

    fn lineage(&self, object: &ObjectId) -> ApiResult<LineageResponse> {
        let mut url = self.url("/v1/lineage/")?;
        url.path_segments_mut()
            .map_err(|_| transport("base url cannot carry a path"))?
            .pop_if_empty()
            .push(object.as_str());
        self.get(url)
    }

    fn eligibility(&self, q: &EligibilityQuery) -> ApiResult<EligibilityResponse> {
        let mut url = self.url("/v1/eligibility")?;
        {
            let mut pairs = url.query_pairs_mut();
            pairs.append_pair("object", q.object.as_str());
            pairs.append_pair("version", &q.version.to_string());
            if let Some(t) = &q.tag {
                pairs.append_pair("tag", t);
            }
        }
        self.get(url)
    }

    fn verify(&self) -> ApiResult<VerifyResponse> {
        self.get(self.url("/v1/verify")?)
    }
}
