/** Typed client for the gateway endpoints (the only API surface used). */

export interface Hit {
  id: string;
  hamming_distance: number;
  label: number | null;
  stage: number | null;
}

export interface QueryResponse {
  query_id: string;
  k: number;
  hits: Hit[];
  heatmap_b64?: string;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function errorMessage(res: Response): Promise<string> {
  try {
    const body = await res.json();
    if (body && typeof body.error === "string") return body.error;
  } catch {
    /* non-JSON error body */
  }
  return `request failed with status ${res.status}`;
}

export async function postQuery(
  image: Blob,
  topk: number,
  signal?: AbortSignal,
): Promise<QueryResponse> {
  const form = new FormData();
  form.append("image", image, "query.png");
  form.append("topk", String(topk));
  const res = await fetch("/query", { method: "POST", body: form, signal });
  if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
  return (await res.json()) as QueryResponse;
}

/** Heatmap overlay as a data URL; throws ApiError (404 when absent). */
export async function fetchHeatmap(id: string): Promise<string> {
  const res = await fetch(`/heatmap/${encodeURIComponent(id)}`);
  if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
  const bytes = new Uint8Array(await res.arrayBuffer());
  let binary = "";
  for (let i = 0; i < bytes.length; i += 0x8000) {
    binary += String.fromCharCode(...bytes.subarray(i, i + 0x8000));
  }
  return `data:image/png;base64,${btoa(binary)}`;
}

export function thumbnailUrl(id: string): string {
  return `/image/${encodeURIComponent(id)}`;
}
