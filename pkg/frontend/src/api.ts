/**
 * Typed client for the annotation service HTTP API.
 *
 * Every mutation returns the full session state; callers replace their
 * local copy wholesale rather than patching it, so the rendered state is
 * always exactly what the server last said.
 */

export type Keypoint = [number, number, number]; // x, y in [0,1], confidence

export interface InstanceState {
  index: number;
  score: number;
  box: [number, number, number, number]; // cx, cy, w, h normalized
  keypoints: Keypoint[];
}

export interface SessionState {
  session_id: string;
  instances: InstanceState[];
  click_count: number;
  loop_count: number;
  finalized: boolean;
  original_dims: [number, number];
}

export interface FinalInstance {
  index: number;
  box: [number, number, number, number];
  keypoints: [number, number][];
}

export interface FinalizeResponse extends SessionState {
  annotation_id: string;
  final: { instances: FinalInstance[] };
}

export interface SkeletonInfo {
  name: string;
  names: string[];
  flip_pairs: [number, number][];
  limb_edges: [number, number][];
}

export interface ClickBody {
  instance_index: number;
  keypoint_index: number;
  x: number;
  y: number;
  loop: boolean;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function parseOrThrow<T>(resp: Response): Promise<T> {
  if (resp.ok) {
    return (await resp.json()) as T;
  }
  let detail = `${resp.status}`;
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(
    private baseUrl = "",
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  skeleton(): Promise<SkeletonInfo> {
    return this.get<SkeletonInfo>("/api/skeleton");
  }

  async createSession(image: Blob, filename = "upload.png"): Promise<SessionState> {
    const form = new FormData();
    form.append("image", image, filename);
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions`, {
      method: "POST",
      body: form,
    });
    return parseOrThrow<SessionState>(resp);
  }

  getSession(id: string): Promise<SessionState> {
    return this.get<SessionState>(`/api/sessions/${id}`);
  }

  async click(id: string, body: ClickBody): Promise<SessionState> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions/${id}/clicks`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return parseOrThrow<SessionState>(resp);
  }

  async undo(id: string): Promise<SessionState> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions/${id}/undo`, {
      method: "POST",
    });
    return parseOrThrow<SessionState>(resp);
  }

  async finalize(id: string): Promise<FinalizeResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/sessions/${id}/finalize`, {
      method: "POST",
    });
    return parseOrThrow<FinalizeResponse>(resp);
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`);
    return parseOrThrow<T>(resp);
  }
}
