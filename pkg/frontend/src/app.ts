/** Query console: upload an image, inspect the ranked gallery, toggle
 * heatmap overlays. Hits render strictly in server order; one query is in
 * flight at a time (resubmission aborts the previous request); heatmaps are
 * fetched lazily, once per hit. */

import { ApiError, Hit, QueryResponse, fetchHeatmap, postQuery, thumbnailUrl } from "./api.js";

export class QuerySession {
  topk = 10;
  currentImage: Blob | null = null;
  lastResponse: QueryResponse | null = null;

  private inflight: AbortController | null = null;
  private heatmapUrls = new Map<string, string>();
  private heatmapFetches = new Map<string, Promise<string>>();
  private heatmapShown = new Set<string>();

  readonly banner: HTMLElement;
  readonly grid: HTMLElement;
  readonly status: HTMLElement;

  constructor(readonly root: HTMLElement) {
    root.innerHTML = `
      <form class="query-form">
        <label class="file-label">query image
          <input type="file" name="image" accept="image/png,image/jpeg" />
        </label>
        <label class="topk-label">top-k
          <input type="range" name="topk" min="1" max="50" value="10" />
          <output name="topk-value">10</output>
        </label>
        <button type="submit">search</button>
      </form>
      <div class="error-banner" role="alert" hidden></div>
      <div class="status" role="status"></div>
      <div class="results-grid"></div>`;
    this.banner = root.querySelector(".error-banner") as HTMLElement;
    this.grid = root.querySelector(".results-grid") as HTMLElement;
    this.status = root.querySelector(".status") as HTMLElement;

    const form = root.querySelector(".query-form") as HTMLFormElement;
    const slider = form.elements.namedItem("topk") as HTMLInputElement;
    const sliderOut = form.querySelector("output") as HTMLOutputElement;
    slider.addEventListener("input", () => {
      this.topk = Number(slider.value);
      sliderOut.value = slider.value;
    });
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const input = form.elements.namedItem("image") as HTMLInputElement;
      const file = input.files && input.files[0];
      if (file) void this.submitQuery(file);
    });
  }

  /** POST the image, then render the ranked hits (server order kept). */
  async submitQuery(image: Blob): Promise<void> {
    this.currentImage = image;
    this.inflight?.abort();
    const controller = new AbortController();
    this.inflight = controller;
    this.status.textContent = "searching…";
    try {
      const response = await postQuery(image, this.topk, controller.signal);
      if (controller.signal.aborted) return;
      this.lastResponse = response;
      this.hideBanner();
      this.renderHits(response.hits);
      this.status.textContent = `${response.hits.length} hits (${response.k}-bit codes)`;
    } catch (err) {
      if (controller.signal.aborted) return; // superseded by a newer query
      this.showBanner(err); // previous results stay on screen
      this.status.textContent = "";
    } finally {
      if (this.inflight === controller) this.inflight = null;
    }
  }

  /** Show/hide the overlay for one hit; fetches the heatmap at most once. */
  async toggleHeatmap(id: string): Promise<void> {
    const card = [...this.grid.querySelectorAll<HTMLElement>(".hit-card")].find(
      (c) => c.dataset.id === id,
    );
    if (!card) return;
    const overlay = card.querySelector(".heatmap-overlay") as HTMLImageElement;
    const button = card.querySelector(".heatmap-toggle") as HTMLButtonElement;
    if (button.disabled) return;

    if (this.heatmapShown.has(id)) {
      this.heatmapShown.delete(id);
      overlay.hidden = true;
      button.setAttribute("aria-pressed", "false");
      return;
    }
    try {
      const url = await this.heatmapUrl(id);
      this.heatmapShown.add(id);
      overlay.src = url;
      overlay.hidden = false;
      button.setAttribute("aria-pressed", "true");
    } catch (err) {
      button.disabled = true;
      button.title = err instanceof ApiError && err.status === 404 ? "no heatmap available" : "heatmap failed to load";
    }
  }

  private heatmapUrl(id: string): Promise<string> {
    const cached = this.heatmapUrls.get(id);
    if (cached !== undefined) return Promise.resolve(cached);
    let pending = this.heatmapFetches.get(id);
    if (pending === undefined) {
      pending = fetchHeatmap(id).then((url) => {
        this.heatmapUrls.set(id, url);
        this.heatmapFetches.delete(id);
        return url;
      });
      pending.catch(() => this.heatmapFetches.delete(id));
      this.heatmapFetches.set(id, pending);
    }
    return pending;
  }

  private renderHits(hits: Hit[]): void {
    this.grid.textContent = "";
    this.heatmapShown.clear();
    for (const hit of hits) {
      this.grid.appendChild(this.card(hit));
    }
  }

  private card(hit: Hit): HTMLElement {
    const fig = document.createElement("figure");
    fig.className = "hit-card";
    fig.dataset.id = hit.id;

    const wrap = document.createElement("div");
    wrap.className = "thumb-wrap";
    const thumb = document.createElement("img");
    thumb.className = "thumb";
    thumb.alt = hit.id;
    thumb.src = thumbnailUrl(hit.id);
    const overlay = document.createElement("img");
    overlay.className = "heatmap-overlay";
    overlay.alt = "";
    overlay.hidden = true;
    wrap.append(thumb, overlay);

    const caption = document.createElement("figcaption");
    const idEl = document.createElement("span");
    idEl.className = "hit-id";
    idEl.textContent = hit.id;
    const dist = document.createElement("span");
    dist.className = "hit-distance";
    dist.textContent = `d=${hit.hamming_distance}`;
    const label = document.createElement("span");
    label.className = `label-badge label-${hit.label ?? "none"}`;
    label.textContent = hit.label === null ? "?" : `class ${hit.label}`;
    const stage = document.createElement("span");
    stage.className = "hit-stage";
    stage.textContent = hit.stage === null ? "" : `stage ${hit.stage.toFixed(2)}`;
    caption.append(idEl, dist, label, stage);

    const toggle = document.createElement("button");
    toggle.type = "button";
    toggle.className = "heatmap-toggle";
    toggle.textContent = "heatmap";
    toggle.setAttribute("aria-pressed", "false");
    toggle.addEventListener("click", () => void this.toggleHeatmap(hit.id));

    fig.append(wrap, caption, toggle);
    return fig;
  }

  private showBanner(err: unknown): void {
    const message = err instanceof ApiError ? `server error ${err.status}: ${err.message}` : `request failed: ${String(err)}`;
    this.banner.textContent = message;
    this.banner.hidden = false;
  }

  private hideBanner(): void {
    this.banner.hidden = true;
    this.banner.textContent = "";
  }
}

declare global {
  interface Window {
    ynetSession?: QuerySession;
  }
}

if (typeof document !== "undefined") {
  const mount = document.getElementById("app");
  if (mount) {
    window.ynetSession = new QuerySession(mount);
  }
}
