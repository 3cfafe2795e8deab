/**
 * DOM wiring: binds the store to the page, routes input events, and
 * redraws the overlay on every state change.
 *
 * boot() takes the document (and optionally an ApiClient) so tests can
 * drive the real page wiring against a fake transport.
 */

import { ApiClient } from "./api.js";
import { renderOverlay } from "./render.js";
import { AnnotatorStore, ViewState } from "./store.js";

const BASE_WIDTH = 512;

export interface App {
  store: AnnotatorStore;
  canvas: HTMLCanvasElement;
  openFile(image: Blob, filename?: string): Promise<void>;
  redraw(): void;
}

export function boot(doc: Document, api: ApiClient = new ApiClient()): App {
  const el = <T extends HTMLElement>(id: string): T => {
    const found = doc.getElementById(id);
    if (!found) throw new Error(`missing element #${id}`);
    return found as T;
  };

  const canvas = el<HTMLCanvasElement>("overlay");
  const photo = el<HTMLImageElement>("photo");
  const fileInput = el<HTMLInputElement>("file");
  const zoomSelect = el<HTMLSelectElement>("zoom");
  const loopToggle = el<HTMLInputElement>("loop");
  const undoButton = el<HTMLButtonElement>("undo");
  const finalizeButton = el<HTMLButtonElement>("finalize");
  const clickCount = el<HTMLElement>("click-count");
  const loopCount = el<HTMLElement>("loop-count");
  const undoDepth = el<HTMLElement>("undo-depth");
  const badge = el<HTMLElement>("badge");
  const banner = el<HTMLElement>("error");
  const hint = el<HTMLElement>("hint");

  const ctx = canvas.getContext("2d");
  const store = new AnnotatorStore(api);

  function viewSize(state: ViewState): { width: number; height: number } {
    const zoom = parseFloat(zoomSelect.value) || 1;
    const dims = state.session ? state.session.original_dims : [1, 1];
    const aspect = dims[1] / dims[0];
    const width = Math.round(BASE_WIDTH * zoom);
    return { width, height: Math.max(1, Math.round(width * aspect)) };
  }

  function hintText(state: ViewState): string {
    switch (state.phase) {
      case "empty":
        return "choose an image to start";
      case "loading":
        return "running the detector";
      case "finalized":
        return "clicks are inert on a finalized session";
      default:
        return state.selection === null
          ? "click a keypoint to select it"
          : "click where it belongs";
    }
  }

  function render(state: ViewState): void {
    const size = viewSize(state);
    if (canvas.width !== size.width) canvas.width = size.width;
    if (canvas.height !== size.height) canvas.height = size.height;
    photo.width = size.width;
    photo.height = size.height;

    const session = state.session;
    clickCount.textContent = String(session ? session.click_count : 0);
    loopCount.textContent = String(session ? session.loop_count : 0);
    undoDepth.textContent = String(session ? session.click_count : 0);
    loopToggle.checked = state.loopEnabled;
    loopToggle.disabled = state.phase === "finalized";
    undoButton.disabled =
      state.phase !== "ready" || session === null || session.click_count === 0;
    finalizeButton.disabled = state.phase !== "ready";
    badge.hidden = state.phase !== "finalized";
    banner.hidden = state.error === null;
    banner.textContent = state.error ?? "";
    hint.textContent = hintText(state);

    if (ctx) renderOverlay(ctx, { width: canvas.width, height: canvas.height }, state);
  }

  async function openFile(image: Blob, filename = "upload.png"): Promise<void> {
    if (typeof URL !== "undefined" && typeof URL.createObjectURL === "function") {
      try {
        photo.src = URL.createObjectURL(image);
      } catch {
        // preview is cosmetic; annotation works without it
      }
    }
    await store.loadImage(image, filename);
  }

  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const scaleX = rect.width > 0 ? canvas.width / rect.width : 1;
    const scaleY = rect.height > 0 ? canvas.height / rect.height : 1;
    const px = (ev.clientX - rect.left) * scaleX;
    const py = (ev.clientY - rect.top) * scaleY;
    store.canvasClick(px, py, { width: canvas.width, height: canvas.height });
  });

  doc.addEventListener("keydown", (ev) => {
    if (ev.key === "Escape") store.cancelSelection();
  });

  fileInput.addEventListener("change", () => {
    const file = fileInput.files && fileInput.files[0];
    if (file) void openFile(file, file.name);
  });

  zoomSelect.addEventListener("change", () => render(store.state));
  loopToggle.addEventListener("change", () => store.setLoop(loopToggle.checked));
  undoButton.addEventListener("click", () => void store.undo());
  finalizeButton.addEventListener("click", () => void store.finalize());

  store.subscribe(render);
  void store.loadSkeleton();
  render(store.state);

  return {
    store,
    canvas,
    openFile,
    redraw: () => render(store.state),
  };
}
