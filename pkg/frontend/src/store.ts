/**
 * Client-side session state and interaction logic.
 *
 * The store never computes poses: every mutation replaces the session with
 * the server's response, so what the overlay renders is exactly what the
 * server last returned. The one exception is the optimistic marker while a
 * click is in flight, which is reverted if the server rejects it.
 *
 * Corrections are a two-click gesture: the first click selects the nearest
 * keypoint within the pick radius, the second places it. Mutations go
 * through a promise chain so at most one request is in flight; later
 * clicks queue behind it.
 */

import {
  ApiClient,
  ApiError,
  FinalizeResponse,
  SessionState,
  SkeletonInfo,
} from "./api.js";
import { pickKeypoint, toNormalized, ViewSize } from "./geometry.js";

export const PICK_RADIUS_PX = 12;

export type Phase = "empty" | "loading" | "ready" | "finalized";

export interface Selection {
  instance: number;
  keypoint: number;
}

export interface ViewState {
  phase: Phase;
  session: SessionState | null;
  skeleton: SkeletonInfo | null;
  selection: Selection | null;
  /** one "instance:keypoint" entry per accepted click, newest last */
  pinned: string[];
  loopEnabled: boolean;
  busy: boolean;
  error: string | null;
  annotationId: string | null;
  final: FinalizeResponse["final"] | null;
}

export function pinKey(instance: number, keypoint: number): string {
  return `${instance}:${keypoint}`;
}

function withKeypointAt(
  session: SessionState,
  instance: number,
  keypoint: number,
  x: number,
  y: number,
): SessionState {
  return {
    ...session,
    instances: session.instances.map((inst) =>
      inst.index !== instance
        ? inst
        : {
            ...inst,
            keypoints: inst.keypoints.map((kp, k) =>
              k === keypoint ? ([x, y, kp[2]] as [number, number, number]) : kp,
            ),
          },
    ),
  };
}

export class AnnotatorStore {
  private listeners: Array<(s: ViewState) => void> = [];
  private chain: Promise<void> = Promise.resolve();
  private pending = 0;

  readonly state: ViewState = {
    phase: "empty",
    session: null,
    skeleton: null,
    selection: null,
    pinned: [],
    loopEnabled: true,
    busy: false,
    error: null,
    annotationId: null,
    final: null,
  };

  constructor(
    private api: ApiClient,
    private pickRadius = PICK_RADIUS_PX,
  ) {}

  subscribe(fn: (s: ViewState) => void): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private emit(): void {
    for (const fn of this.listeners) fn(this.state);
  }

  private fail(err: unknown): void {
    if (err instanceof ApiError) {
      this.state.error = err.message;
    } else {
      const msg = err instanceof Error ? err.message : String(err);
      this.state.error = `service unreachable: ${msg}`;
    }
  }

  /** Serialize mutations: at most one request in flight, the rest queued. */
  private submit(op: () => Promise<void>): Promise<void> {
    this.pending += 1;
    this.state.busy = true;
    this.emit();
    const done = this.chain.then(async () => {
      try {
        await op();
      } finally {
        this.pending -= 1;
        this.state.busy = this.pending > 0;
        this.emit();
      }
    });
    this.chain = done.then(
      () => undefined,
      () => undefined,
    );
    return done;
  }

  async loadSkeleton(): Promise<void> {
    try {
      this.state.skeleton = await this.api.skeleton();
      this.state.error = null;
    } catch (err) {
      this.fail(err);
    }
    this.emit();
  }

  loadImage(image: Blob, filename = "upload.png"): Promise<void> {
    const prevPhase = this.state.phase === "loading" ? "empty" : this.state.phase;
    this.state.phase = "loading";
    this.state.error = null;
    this.emit();
    return this.submit(async () => {
      try {
        const session = await this.api.createSession(image, filename);
        this.state.session = session;
        this.state.phase = "ready";
        this.state.selection = null;
        this.state.pinned = [];
        this.state.annotationId = null;
        this.state.final = null;
      } catch (err) {
        this.state.phase = this.state.session ? prevPhase : "empty";
        this.fail(err);
      }
    });
  }

  /**
   * Handle a canvas click at pixel (px, py). First click of a gesture
   * selects, second places. Clicks are inert unless a session is open.
   */
  canvasClick(px: number, py: number, view: ViewSize): Promise<void> | null {
    const session = this.state.session;
    if (this.state.phase !== "ready" || session === null) return null;

    if (this.state.selection === null) {
      const hit = pickKeypoint(session.instances, px, py, view, this.pickRadius);
      if (hit !== null) {
        this.state.selection = { instance: hit.instance, keypoint: hit.keypoint };
        this.emit();
      }
      return null;
    }

    const { instance, keypoint } = this.state.selection;
    const { x, y } = toNormalized(px, py, view);
    this.state.selection = null;

    // optimistic marker; the response (or a revert) replaces it
    const snapshot = this.state.session!;
    this.state.session = withKeypointAt(snapshot, instance, keypoint, x, y);
    const key = pinKey(instance, keypoint);
    this.state.pinned = [...this.state.pinned, key];
    this.state.error = null;
    this.emit();

    return this.submit(async () => {
      try {
        const resp = await this.api.click(snapshot.session_id, {
          instance_index: instance,
          keypoint_index: keypoint,
          x,
          y,
          loop: this.state.loopEnabled,
        });
        this.state.session = resp;
      } catch (err) {
        // drop this click's marker and pin entry, keep everything else
        this.state.session = snapshot;
        const at = this.state.pinned.lastIndexOf(key);
        if (at >= 0) {
          this.state.pinned = this.state.pinned.filter((_, i) => i !== at);
        }
        this.fail(err);
      }
    });
  }

  cancelSelection(): void {
    if (this.state.selection !== null) {
      this.state.selection = null;
      this.emit();
    }
  }

  setLoop(enabled: boolean): void {
    this.state.loopEnabled = enabled;
    this.emit();
  }

  undo(): Promise<void> | null {
    const session = this.state.session;
    if (this.state.phase !== "ready" || session === null) return null;
    if (session.click_count === 0 && this.state.pinned.length === 0) return null;
    return this.submit(async () => {
      try {
        const resp = await this.api.undo(session.session_id);
        this.state.session = resp;
        this.state.pinned = this.state.pinned.slice(0, -1);
      } catch (err) {
        this.fail(err);
      }
    });
  }

  finalize(): Promise<void> | null {
    const session = this.state.session;
    if (this.state.phase !== "ready" || session === null) return null;
    return this.submit(async () => {
      try {
        const resp = await this.api.finalize(session.session_id);
        this.state.session = resp;
        this.state.phase = "finalized";
        this.state.selection = null;
        this.state.annotationId = resp.annotation_id;
        this.state.final = resp.final;
      } catch (err) {
        this.fail(err);
      }
    });
  }

  clearError(): void {
    this.state.error = null;
    this.emit();
  }

  /** Settle after the queue drains; for tests and callers that must sync. */
  idle(): Promise<void> {
    return this.chain;
  }
}
