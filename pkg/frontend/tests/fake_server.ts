/**
 * In-memory stand-in for the annotation service, speaking the same
 * JSON-over-fetch wire format. Refinement is a fixed contraction toward
 * the canvas center so tests get deterministic, non-trivial movement;
 * pinned keypoints (ever clicked) survive it, exactly like the service.
 */

export type Kp = [number, number, number];

interface Instance {
  index: number;
  score: number;
  box: [number, number, number, number];
  keypoints: Kp[];
}

interface Session {
  id: string;
  instances: Instance[];
  pins: Map<string, [number, number]>;
  snapshots: { instances: Instance[]; pins: Map<string, [number, number]>; loops: number }[];
  clickCount: number;
  loops: number;
  finalized: boolean;
  annotationId: string | null;
  final: { instances: { index: number; box: number[]; keypoints: [number, number][] }[] } | null;
  originalDims: [number, number];
}

const SKELETON = {
  name: "toy-5",
  names: ["head", "chest", "pelvis", "left_foot", "right_foot"],
  flip_pairs: [[3, 4]],
  limb_edges: [
    [0, 1],
    [1, 2],
    [2, 3],
    [2, 4],
  ],
};

function freshInstances(): Instance[] {
  const keypoints: Kp[] = [];
  for (let k = 0; k < SKELETON.names.length; k++) {
    keypoints.push([0.2 + 0.1 * k, 0.3 + 0.08 * k, 0.35 + 0.12 * k]);
  }
  return [{ index: 0, score: 0.9, box: [0.45, 0.5, 0.55, 0.5], keypoints }];
}

function copyInstances(instances: Instance[]): Instance[] {
  return instances.map((inst) => ({
    ...inst,
    box: [...inst.box] as Instance["box"],
    keypoints: inst.keypoints.map((kp) => [...kp] as Kp),
  }));
}

function json(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

export class FakeServer {
  sessions = new Map<string, Session>();
  requests: string[] = [];
  maxConcurrent = 0;
  failNextClick = false;
  down = false;
  private inFlight = 0;
  private nextId = 1;

  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    const method = init?.method ?? "GET";
    this.requests.push(`${method} ${url}`);
    if (this.down) throw new TypeError("fetch failed");
    this.inFlight += 1;
    this.maxConcurrent = Math.max(this.maxConcurrent, this.inFlight);
    try {
      // hold the request across a tick so overlap would be observable
      await new Promise((resolve) => setTimeout(resolve, 0));
      return this.route(method, url, init);
    } finally {
      this.inFlight -= 1;
    }
  };

  private route(method: string, url: string, init?: RequestInit): Response {
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    if (method === "GET" && path === "/api/skeleton") return json(200, SKELETON);
    if (method === "POST" && path === "/api/sessions") return this.create();

    let m = path.match(/^\/api\/sessions\/([^/]+)$/);
    if (m && method === "GET") return this.respond(m[1]);
    m = path.match(/^\/api\/sessions\/([^/]+)\/clicks$/);
    if (m && method === "POST") {
      return this.click(m[1], JSON.parse(String(init?.body)));
    }
    m = path.match(/^\/api\/sessions\/([^/]+)\/undo$/);
    if (m && method === "POST") return this.undo(m[1]);
    m = path.match(/^\/api\/sessions\/([^/]+)\/finalize$/);
    if (m && method === "POST") return this.finalize(m[1]);
    return json(404, { detail: `no route ${method} ${path}` });
  }

  private create(): Response {
    const id = `s${this.nextId++}`;
    this.sessions.set(id, {
      id,
      instances: freshInstances(),
      pins: new Map(),
      snapshots: [],
      clickCount: 0,
      loops: 0,
      finalized: false,
      annotationId: null,
      final: null,
      originalDims: [96, 64],
    });
    return this.respond(id, 201);
  }

  private get(id: string): Session {
    const s = this.sessions.get(id);
    if (!s) throw new Error(`unknown session ${id}`);
    return s;
  }

  private statePayload(s: Session) {
    return {
      session_id: s.id,
      instances: copyInstances(s.instances),
      click_count: s.clickCount,
      loop_count: s.loops,
      finalized: s.finalized,
      original_dims: [...s.originalDims],
    };
  }

  private respond(id: string, status = 200): Response {
    if (!this.sessions.has(id)) return json(404, { detail: `unknown session ${id}` });
    return json(status, this.statePayload(this.get(id)));
  }

  private click(
    id: string,
    body: { instance_index: number; keypoint_index: number; x: number; y: number; loop: boolean },
  ): Response {
    const s = this.get(id);
    if (s.finalized) return json(409, { detail: "session is finalized" });
    if (this.failNextClick) {
      this.failNextClick = false;
      return json(400, { detail: "injected validation failure" });
    }
    const inst = s.instances[body.instance_index];
    if (!inst) return json(400, { detail: `instance index ${body.instance_index} out of range` });
    if (body.keypoint_index < 0 || body.keypoint_index >= inst.keypoints.length) {
      return json(400, { detail: `keypoint index ${body.keypoint_index} out of range` });
    }
    s.snapshots.push({
      instances: copyInstances(s.instances),
      pins: new Map(s.pins),
      loops: s.loops,
    });
    inst.keypoints[body.keypoint_index] = [body.x, body.y, 1];
    s.pins.set(`${body.instance_index}:${body.keypoint_index}`, [body.x, body.y]);
    s.clickCount += 1;
    if (body.loop) this.loop(s);
    return this.respond(id);
  }

  private loop(s: Session): void {
    for (const inst of s.instances) {
      for (let k = 0; k < inst.keypoints.length; k++) {
        const pin = s.pins.get(`${inst.index}:${k}`);
        if (pin) {
          inst.keypoints[k] = [pin[0], pin[1], 1];
        } else {
          const [x, y, c] = inst.keypoints[k];
          inst.keypoints[k] = [0.25 + 0.5 * x, 0.25 + 0.5 * y, c];
        }
      }
    }
    s.loops += 1;
  }

  private undo(id: string): Response {
    const s = this.get(id);
    if (s.finalized) return json(409, { detail: "session is finalized" });
    const snap = s.snapshots.pop();
    if (!snap) return json(400, { detail: "nothing to undo" });
    s.instances = snap.instances;
    s.pins = snap.pins;
    s.loops = snap.loops;
    s.clickCount -= 1;
    return this.respond(id);
  }

  private finalize(id: string): Response {
    const s = this.get(id);
    if (!s.finalized) {
      s.finalized = true;
      s.annotationId = `ann-${s.id}`;
      s.final = {
        instances: s.instances.map((inst) => ({
          index: inst.index,
          box: [...inst.box],
          keypoints: inst.keypoints.map(([x, y]) => [x, y] as [number, number]),
        })),
      };
    }
    return json(200, {
      ...this.statePayload(s),
      annotation_id: s.annotationId,
      final: s.final,
    });
  }
}
